import { spawn, type ChildProcess } from "node:child_process";
import { mkdirSync, mkdtempSync } from "node:fs";
import * as http from "node:http";
import { tmpdir } from "node:os";
import { join } from "node:path";
import type {
  DetectionDetail,
  Progress,
  QueueItem,
  QueuePage,
  ReviewApi,
  TileRef,
  VerdictBody,
} from "../src/api.js";

export async function until(cond: () => boolean, timeoutMs = 10_000): Promise<void> {
  const start = Date.now();
  while (!cond()) {
    if (Date.now() - start > timeoutMs) throw new Error("condition not met in time");
    await new Promise((resolve) => setTimeout(resolve, 5));
  }
}

export function makeItem(i: number, overrides: Partial<QueueItem> = {}): QueueItem {
  return {
    id: `b-${String(i).padStart(3, "0")}`,
    tile: { z: 18, x: 208896, y: 91184 },
    period: "2021",
    area_m2: 61.0,
    pixel_count: 381,
    suggested_count: 1,
    status: "pending",
    bbox_px: [8, 8, 32, 32],
    ...overrides,
  };
}

export const SQUARE_OUTLINE: [number, number][] = [
  [8, 8],
  [32, 8],
  [32, 32],
  [8, 32],
  [8, 8],
];

/** Scripted in-memory stand-in for the review service. */
export class MockApi implements ReviewApi {
  calls = { progress: 0, queue: 0, detection: 0, verdict: 0 };
  verdicts: VerdictBody[] = [];
  items: QueueItem[];
  progressValue: Progress;
  failQueue = false;
  /** fail this many verdict POSTs before succeeding again */
  failVerdicts = 0;
  private gate: Promise<void> | null = null;

  constructor(count: number) {
    this.items = Array.from({ length: count }, (_, i) => makeItem(i));
    this.progressValue = {
      pending: count,
      accepted: 0,
      rejected: 0,
      recounted: 0,
      current_verified_count: count,
    };
  }

  /** Block verdict resolution until the returned release function runs. */
  holdVerdicts(): () => void {
    let release!: () => void;
    this.gate = new Promise<void>((resolve) => (release = resolve));
    return () => {
      this.gate = null;
      release();
    };
  }

  async progress(): Promise<Progress> {
    this.calls.progress += 1;
    if (this.failQueue) throw new TypeError("fetch failed");
    return { ...this.progressValue };
  }

  async queue(): Promise<QueuePage> {
    this.calls.queue += 1;
    if (this.failQueue) throw new TypeError("fetch failed");
    const items = this.items.filter((item) => item.status === "pending");
    return { items: items.map((item) => ({ ...item })), total: items.length, offset: 0, limit: 500 };
  }

  async detection(id: string): Promise<DetectionDetail> {
    this.calls.detection += 1;
    const item = this.items.find((it) => it.id === id);
    if (!item) throw new Error(`no detection ${id}`);
    return {
      feature: {
        type: "Feature",
        geometry: { type: "Point", coordinates: [106.9, 47.9] },
        properties: { id },
      },
      outline_px: SQUARE_OUTLINE,
      suggested_count: item.suggested_count,
      status: item.status,
    };
  }

  async verdict(body: VerdictBody): Promise<QueueItem> {
    this.calls.verdict += 1;
    if (this.gate) await this.gate;
    if (this.failVerdicts > 0) {
      this.failVerdicts -= 1;
      throw new TypeError("fetch failed");
    }
    this.verdicts.push(body);
    const item = this.items.find((it) => it.id === body.detection_id);
    if (!item) throw new Error(`no detection ${body.detection_id}`);
    const status =
      body.action === "accept" ? "accepted" : body.action === "reject" ? "rejected" : "recounted";
    item.status = status;
    const p = this.progressValue;
    p.pending -= 1;
    if (status === "accepted") p.accepted += 1;
    if (status === "rejected") {
      p.rejected += 1;
      p.current_verified_count -= 1;
    }
    if (status === "recounted") {
      p.recounted += 1;
      p.current_verified_count += (body.count ?? 0) - 1;
    }
    return { ...item, status };
  }

  tileUrl(period: string, tile: TileRef): string {
    return `/api/tile/${period}/${tile.z}/${tile.x}/${tile.y}`;
  }
}

/** Plain node:http fetch so requests bypass the DOM emulation entirely. */
export function rawFetch(url: string | URL, init?: RequestInit): Promise<Response> {
  return new Promise((resolve, reject) => {
    const headers: Record<string, string> = {};
    if (init?.headers) {
      for (const [key, value] of Object.entries(init.headers as Record<string, string>)) {
        headers[key] = value;
      }
    }
    const body = init?.body === undefined ? undefined : Buffer.from(String(init.body), "utf-8");
    // the python server reads exactly Content-Length bytes; chunked bodies read as empty
    if (body) headers["Content-Length"] = String(body.byteLength);
    const req = http.request(String(url), { method: init?.method ?? "GET", headers }, (res) => {
      const chunks: Buffer[] = [];
      res.on("data", (chunk: Buffer) => chunks.push(chunk));
      res.on("end", () => {
        const body = Buffer.concat(chunks).toString("utf-8");
        const status = res.statusCode ?? 0;
        resolve({
          ok: status >= 200 && status < 300,
          status,
          text: async () => body,
          json: async () => JSON.parse(body),
        } as unknown as Response);
      });
    });
    req.on("error", reject);
    if (body) req.write(body);
    req.end();
  });
}

export interface Service {
  base: string;
  logPath: string;
  stop: () => Promise<void>;
}

/** Spawn the real review service on a random port and wait for its banner. */
export async function startService(detectionsPath: string): Promise<Service> {
  const tmp = mkdtempSync(join(tmpdir(), "review-ui-"));
  const tilesDir = join(tmp, "tiles");
  mkdirSync(tilesDir, { recursive: true });
  const logPath = join(tmp, "verdicts.jsonl");

  const proc: ChildProcess = spawn(
    "gerscan",
    [
      "serve-review",
      "--host", "127.0.0.1",
      "--port", "0",
      "--detections", detectionsPath,
      "--tiles", tilesDir,
      "--log", logPath,
    ],
    { stdio: ["ignore", "pipe", "inherit"], env: { ...process.env, PYTHONUNBUFFERED: "1" } },
  );

  const base = await new Promise<string>((resolve, reject) => {
    let buffer = "";
    const timer = setTimeout(() => reject(new Error("service did not start")), 20_000);
    proc.stdout!.on("data", (chunk) => {
      buffer += String(chunk);
      const match = buffer.match(/ on (http:\/\/\S+) /);
      if (match) {
        clearTimeout(timer);
        resolve(match[1]!);
      }
    });
    proc.on("exit", (code) => {
      clearTimeout(timer);
      reject(new Error(`service exited before binding (code ${code})`));
    });
  });

  const stop = () =>
    new Promise<void>((resolve) => {
      proc.on("exit", () => resolve());
      proc.kill("SIGINT");
      setTimeout(() => {
        proc.kill("SIGKILL");
        resolve();
      }, 5_000).unref();
    });

  return { base, logPath, stop };
}
