import { ReviewApi, TileRef } from "./api.js";
import { ReviewStore } from "./state.js";

export interface AppOptions {
  root: HTMLElement;
  api: ReviewApi;
  /** restrict the queue to one imagery period */
  period?: string;
  /** show the same tile from a second period next to the current one */
  comparePeriod?: string;
}

export interface App {
  store: ReviewStore;
  /** resolves after the initial queue + progress fetch */
  ready: Promise<void>;
  destroy: () => void;
}

const KEYS = new Set([
  "a", "A", "r", "R", "o", "O",
  "Enter", "Escape", "Backspace",
  "ArrowLeft", "ArrowRight", "ArrowUp", "ArrowDown",
  "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
]);

const PAGE = `
<div class="review-app">
  <header>
    <h1>ger review</h1>
    <div class="progress" data-role="progress">loading…</div>
  </header>
  <div class="banner" data-role="banner" hidden></div>
  <main>
    <figure class="tile-frame" data-role="frame">
      <img data-role="tile" alt="detection tile" width="256" height="256">
      <div class="placeholder" data-role="placeholder" hidden></div>
      <svg data-role="overlay" viewBox="0 0 256 256" width="256" height="256">
        <polygon data-role="outline" points=""></polygon>
      </svg>
    </figure>
    <figure class="tile-frame compare" data-role="compare-frame" hidden>
      <img data-role="compare-tile" alt="comparison tile" width="256" height="256">
      <div class="placeholder" data-role="compare-placeholder" hidden></div>
      <figcaption data-role="compare-caption"></figcaption>
    </figure>
    <aside class="side">
      <div data-role="position"></div>
      <dl class="meta" data-role="meta"></dl>
      <div class="draft" data-role="draft" hidden></div>
      <div class="done" data-role="done" hidden>queue clear, nothing pending</div>
    </aside>
  </main>
  <footer class="help">
    A accept · R reject · digits then Enter set count · ←/→ navigate · O outline
  </footer>
</div>`;

function roleOf<T extends HTMLElement | SVGElement>(root: HTMLElement, role: string): T {
  const el = root.querySelector(`[data-role="${role}"]`);
  if (!el) throw new Error(`missing element for role ${role}`);
  return el as T;
}

export function createApp(options: AppOptions): App {
  const { root, api } = options;
  const store = new ReviewStore(api, options.period);
  root.innerHTML = PAGE;

  const progressEl = roleOf<HTMLElement>(root, "progress");
  const bannerEl = roleOf<HTMLElement>(root, "banner");
  const tileImg = roleOf<HTMLImageElement>(root, "tile");
  const placeholderEl = roleOf<HTMLElement>(root, "placeholder");
  const overlaySvg = roleOf<SVGElement>(root, "overlay");
  const outlineEl = roleOf<SVGElement>(root, "outline");
  const compareFrame = roleOf<HTMLElement>(root, "compare-frame");
  const compareImg = roleOf<HTMLImageElement>(root, "compare-tile");
  const comparePlaceholder = roleOf<HTMLElement>(root, "compare-placeholder");
  const compareCaption = roleOf<HTMLElement>(root, "compare-caption");
  const positionEl = roleOf<HTMLElement>(root, "position");
  const metaEl = roleOf<HTMLElement>(root, "meta");
  const draftEl = roleOf<HTMLElement>(root, "draft");
  const doneEl = roleOf<HTMLElement>(root, "done");

  const tileLabel = (period: string, tile: TileRef) =>
    `${period}/${tile.z}/${tile.x}/${tile.y}`;

  // a failed tile request shows a labeled placeholder instead of a broken img
  tileImg.addEventListener("error", () => {
    tileImg.hidden = true;
    placeholderEl.hidden = false;
  });
  compareImg.addEventListener("error", () => {
    compareImg.hidden = true;
    comparePlaceholder.hidden = false;
  });

  function showTile(
    img: HTMLImageElement,
    placeholder: HTMLElement,
    period: string,
    tile: TileRef,
  ): void {
    const url = api.tileUrl(period, tile);
    placeholder.textContent = `missing tile ${tileLabel(period, tile)}`;
    // only touch src when the tile actually changed, so overlay toggles and
    // progress updates never refetch the image
    if (img.dataset.src !== url) {
      img.dataset.src = url;
      img.src = url;
      img.hidden = false;
      placeholder.hidden = true;
    }
  }

  function render(): void {
    const state = store.state;

    if (state.progress) {
      const p = state.progress;
      progressEl.textContent =
        `pending ${p.pending} · accepted ${p.accepted} · rejected ${p.rejected}` +
        ` · recounted ${p.recounted} · verified ${p.current_verified_count}`;
    }

    if (state.banner) {
      bannerEl.hidden = false;
      bannerEl.textContent =
        state.banner.kind === "error"
          ? `${state.banner.message} — Enter retries, Esc dismisses`
          : state.banner.message;
      bannerEl.dataset.kind = state.banner.kind;
    } else {
      bannerEl.hidden = true;
      bannerEl.textContent = "";
    }

    const item = store.current();
    if (item) {
      showTile(tileImg, placeholderEl, item.period, item.tile);

      const outline = store.outline();
      overlaySvg.setAttribute("data-visible", state.overlay ? "true" : "false");
      if (outline && state.overlay) {
        outlineEl.setAttribute("points", outline.map(([c, r]) => `${c},${r}`).join(" "));
      } else {
        outlineEl.setAttribute("points", "");
      }

      positionEl.textContent = `item ${state.index + 1} of ${state.items.length}`;
      metaEl.innerHTML = "";
      const rows: Array<[string, string]> = [
        ["id", item.id],
        ["tile", tileLabel(item.period, item.tile)],
        ["area", `${item.area_m2.toFixed(1)} m²`],
        ["pixels", String(item.pixel_count)],
        ["suggested", String(item.suggested_count)],
        ["status", item.status],
      ];
      for (const [term, value] of rows) {
        const dt = document.createElement("dt");
        dt.textContent = term;
        const dd = document.createElement("dd");
        dd.textContent = value;
        metaEl.append(dt, dd);
      }

      if (options.comparePeriod && options.comparePeriod !== item.period) {
        compareFrame.hidden = false;
        compareCaption.textContent = options.comparePeriod;
        showTile(compareImg, comparePlaceholder, options.comparePeriod, item.tile);
      } else {
        compareFrame.hidden = true;
      }
    } else {
      positionEl.textContent = "";
      metaEl.innerHTML = "";
      compareFrame.hidden = true;
    }

    draftEl.hidden = state.draft === "";
    draftEl.textContent = state.draft === "" ? "" : `set count: ${state.draft}_`;
    doneEl.hidden = !state.done;
  }

  const unsubscribe = store.subscribe(render);

  const onKey = (event: KeyboardEvent) => {
    if (event.ctrlKey || event.metaKey || event.altKey) return;
    if (!KEYS.has(event.key)) return;
    event.preventDefault();
    void store.handleKey(event.key);
  };
  document.addEventListener("keydown", onKey);

  const ready = store.load();
  render();

  return {
    store,
    ready,
    destroy: () => {
      document.removeEventListener("keydown", onKey);
      unsubscribe();
      root.innerHTML = "";
    },
  };
}
