/** Typed client for the review service JSON API.
 *
 * The UI never computes counts itself; every number it shows comes out of
 * these endpoints. The fetch function is injectable so tests can count or
 * fail requests.
 */

export interface TileRef {
  z: number;
  x: number;
  y: number;
}

export interface QueueItem {
  id: string;
  tile: TileRef;
  period: string;
  area_m2: number;
  pixel_count: number;
  suggested_count: number;
  status: string;
  bbox_px: [number, number, number, number];
}

export interface QueuePage {
  items: QueueItem[];
  total: number;
  offset: number;
  limit: number;
}

export interface Progress {
  pending: number;
  accepted: number;
  rejected: number;
  recounted: number;
  current_verified_count: number;
}

export interface DetectionDetail {
  feature: {
    type: string;
    geometry: { type: string; coordinates: [number, number] };
    properties: Record<string, unknown>;
  };
  outline_px: [number, number][];
  suggested_count: number;
  status: string;
}

export type VerdictAction = "accept" | "reject" | "set_count";

export interface VerdictBody {
  detection_id: string;
  action: VerdictAction;
  count?: number;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

const defaultFetch: FetchLike = (url, init) => fetch(url, init);

/** What the store and renderer actually require; mocks implement this. */
export interface ReviewApi {
  progress(): Promise<Progress>;
  queue(params?: {
    period?: string;
    status?: string;
    limit?: number;
    offset?: number;
  }): Promise<QueuePage>;
  detection(id: string): Promise<DetectionDetail>;
  verdict(body: VerdictBody): Promise<QueueItem>;
  tileUrl(period: string, tile: TileRef): string;
}

export class ApiClient implements ReviewApi {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: FetchLike = defaultFetch,
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const resp = await this.fetchFn(this.base + path);
    if (!resp.ok) {
      throw new ApiError(resp.status, await resp.text());
    }
    return (await resp.json()) as T;
  }

  progress(): Promise<Progress> {
    return this.getJson<Progress>("/api/progress");
  }

  queue(
    params: { period?: string; status?: string; limit?: number; offset?: number } = {},
  ): Promise<QueuePage> {
    const query = new URLSearchParams();
    if (params.period !== undefined) query.set("period", params.period);
    if (params.status !== undefined) query.set("status", params.status);
    if (params.limit !== undefined) query.set("limit", String(params.limit));
    if (params.offset !== undefined) query.set("offset", String(params.offset));
    const suffix = query.toString();
    return this.getJson<QueuePage>(suffix ? `/api/queue?${suffix}` : "/api/queue");
  }

  detection(id: string): Promise<DetectionDetail> {
    return this.getJson<DetectionDetail>(`/api/detections/${encodeURIComponent(id)}`);
  }

  async verdict(body: VerdictBody): Promise<QueueItem> {
    const resp = await this.fetchFn(this.base + "/api/verdict", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) {
      throw new ApiError(resp.status, await resp.text());
    }
    return (await resp.json()) as QueueItem;
  }

  tileUrl(period: string, tile: TileRef): string {
    return `${this.base}/api/tile/${encodeURIComponent(period)}/${tile.z}/${tile.x}/${tile.y}`;
  }
}
