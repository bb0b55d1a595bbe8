import type { ConfigResponse, ControlBlock, TreeSummary } from "./types.js";

export interface ListTreesParams {
  host?: string;
  metric?: string;
  since_us?: number;
  limit?: number;
}

/** What the console needs from a collector; CollectorClient is the real
 * implementation, tests substitute fakes. */
export interface CollectorApi {
  getConfig(host: string): Promise<ConfigResponse>;
  putConfig(host: string, block: ControlBlock): Promise<{ revision: number }>;
  listTrees(params?: ListTreesParams): Promise<TreeSummary[]>;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class CollectorClient implements CollectorApi {
  constructor(private baseUrl: string = "") {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await fetch(this.baseUrl + path, {
      method,
      headers: body === undefined ? {} : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await response.text();
    if (!response.ok) {
      let detail = text;
      try {
        detail = (JSON.parse(text) as { error?: string }).error ?? text;
      } catch {
        // non-JSON error body; use it verbatim
      }
      throw new ApiError(response.status, detail);
    }
    return JSON.parse(text) as T;
  }

  getConfig(host: string): Promise<ConfigResponse> {
    return this.request("GET", `/v1/config?host=${encodeURIComponent(host)}`);
  }

  putConfig(host: string, block: ControlBlock): Promise<{ revision: number }> {
    return this.request("PUT", `/v1/config?host=${encodeURIComponent(host)}`, block);
  }

  listTrees(params: ListTreesParams = {}): Promise<TreeSummary[]> {
    const query = new URLSearchParams();
    for (const [key, value] of Object.entries(params)) {
      if (value !== undefined) query.set(key, String(value));
    }
    const suffix = query.toString() ? `?${query.toString()}` : "";
    return this.request("GET", `/v1/trees${suffix}`);
  }
}
