import { ReviewApi, QueueItem, Progress, VerdictBody, VerdictAction } from "./api.js";

/** Error banner carries the exact body to re-POST; nothing is lost silently. */
export type Banner =
  | { kind: "error"; message: string; retry: VerdictBody }
  | { kind: "offline"; message: string }
  | null;

export interface ViewState {
  items: QueueItem[];
  index: number;
  overlay: boolean;
  draft: string;
  progress: Progress | null;
  banner: Banner;
  busy: boolean;
  done: boolean;
  offline: boolean;
}

const MAX_DRAFT_DIGITS = 4;

/** Review queue state machine, independent of the DOM.
 *
 * Verdicts advance optimistically: the item leaves the local queue before
 * the POST resolves, and is restored at its old position if the POST fails.
 * While a POST is in flight every further verdict key is ignored, so each
 * operator action issues exactly one request. Progress counters are only
 * ever replaced wholesale by an /api/progress response.
 */
export class ReviewStore {
  state: ViewState = {
    items: [],
    index: 0,
    overlay: true,
    draft: "",
    progress: null,
    banner: null,
    busy: false,
    done: false,
    offline: false,
  };

  private outlines = new Map<string, [number, number][]>();
  private listeners: Array<() => void> = [];

  constructor(
    private readonly api: ReviewApi,
    private readonly period?: string,
  ) {}

  subscribe(listener: () => void): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  current(): QueueItem | null {
    return this.state.items[this.state.index] ?? null;
  }

  /** Cached pixel outline of the current detection, if already fetched. */
  outline(): [number, number][] | null {
    const item = this.current();
    return item ? (this.outlines.get(item.id) ?? null) : null;
  }

  async load(): Promise<void> {
    try {
      const [page, progress] = await Promise.all([
        this.api.queue({ period: this.period, status: "pending", limit: 500 }),
        this.api.progress(),
      ]);
      this.state.items = page.items;
      this.state.index = 0;
      this.state.progress = progress;
      this.state.done = page.items.length === 0;
      this.state.offline = false;
      this.state.banner = null;
    } catch (exc) {
      this.state.offline = true;
      this.state.banner = {
        kind: "offline",
        message: `service unreachable (${describe(exc)}); read-only until reload`,
      };
    }
    this.emit();
    void this.ensureOutline();
  }

  async handleKey(key: string): Promise<void> {
    if (this.state.offline) {
      if (key === "Enter") await this.load();
      return;
    }
    if (this.state.busy) return;

    if (this.state.banner?.kind === "error") {
      if (key === "Enter") await this.retry();
      else if (key === "Escape") {
        this.state.banner = null;
        this.emit();
      }
      return;
    }

    if (/^[0-9]$/.test(key)) {
      if (this.state.draft.length < MAX_DRAFT_DIGITS && this.current()) {
        this.state.draft += key;
        this.emit();
      }
      return;
    }

    switch (key) {
      case "a":
      case "A":
        await this.submit("accept");
        return;
      case "r":
      case "R":
        await this.submit("reject");
        return;
      case "Enter": {
        const count = parseInt(this.state.draft, 10);
        this.state.draft = "";
        if (Number.isFinite(count) && count >= 1) {
          await this.submit("set_count", count);
        } else {
          this.emit();
        }
        return;
      }
      case "Backspace":
        this.state.draft = this.state.draft.slice(0, -1);
        this.emit();
        return;
      case "Escape":
        this.state.draft = "";
        this.emit();
        return;
      case "ArrowRight":
      case "ArrowDown":
        this.move(1);
        return;
      case "ArrowLeft":
      case "ArrowUp":
        this.move(-1);
        return;
      case "o":
      case "O":
        this.state.overlay = !this.state.overlay;
        this.emit();
        return;
      default:
        return;
    }
  }

  private move(step: number): void {
    const n = this.state.items.length;
    if (n === 0) return;
    const next = Math.min(Math.max(this.state.index + step, 0), n - 1);
    if (next !== this.state.index) {
      this.state.index = next;
      this.state.draft = "";
      this.emit();
      void this.ensureOutline();
    }
  }

  private async submit(action: VerdictAction, count?: number): Promise<void> {
    const item = this.current();
    if (!item) return;
    const body: VerdictBody = { detection_id: item.id, action };
    if (count !== undefined) body.count = count;
    await this.send(item, body);
  }

  private async send(item: QueueItem, body: VerdictBody): Promise<void> {
    const removedAt = this.state.items.indexOf(item);
    this.state.items.splice(removedAt, 1);
    this.state.index = Math.min(removedAt, Math.max(this.state.items.length - 1, 0));
    this.state.done = this.state.items.length === 0;
    this.state.draft = "";
    this.state.busy = true;
    this.emit();
    try {
      await this.api.verdict(body);
      // counts come from the service, never from local arithmetic
      this.state.progress = await this.api.progress();
      this.state.banner = null;
    } catch (exc) {
      this.state.items.splice(removedAt, 0, item);
      this.state.index = removedAt;
      this.state.done = false;
      this.state.banner = {
        kind: "error",
        message: `${body.action} on ${body.detection_id} failed (${describe(exc)})`,
        retry: body,
      };
    } finally {
      this.state.busy = false;
      this.emit();
      void this.ensureOutline();
    }
  }

  private async retry(): Promise<void> {
    const banner = this.state.banner;
    if (banner?.kind !== "error") return;
    const item = this.state.items.find((it) => it.id === banner.retry.detection_id);
    this.state.banner = null;
    if (!item) {
      // the verdict landed elsewhere (latest-wins); just refresh the numbers
      await this.load();
      return;
    }
    await this.send(item, banner.retry);
  }

  private async ensureOutline(): Promise<void> {
    const item = this.current();
    if (!item || this.outlines.has(item.id)) return;
    try {
      const detail = await this.api.detection(item.id);
      this.outlines.set(item.id, detail.outline_px);
      this.emit();
    } catch {
      // outline is decoration; the tile and metadata still render
    }
  }
}

function describe(exc: unknown): string {
  if (exc instanceof Error) return exc.message || exc.name;
  return String(exc);
}
