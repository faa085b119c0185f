/**
 * Typed client for the labelserve HTTP+JSON API.
 *
 * The server issues an X-Session token on the first response; the client
 * persists it so votes and queue state survive a page refresh. All
 * network access goes through an injectable transport, which is what the
 * tests replace with an in-memory server.
 */

export type ManualLabel = "positive" | "negative" | "ambiguous";
export type Slot = "a" | "b";

export interface HealthResponse {
  status: string;
  run: string;
  iteration: number;
  pairs: number;
  unlabeled: number;
}

export interface QueueItem {
  sample_id: string;
  estimate_url: string;
  condition_url: string;
}

export interface QueueResponse {
  items: QueueItem[];
  total_unlabeled: number;
}

export interface LabelResponse {
  sample_id: string;
  label: ManualLabel;
  provenance: string;
}

export interface PairItem {
  pair_id: string;
  condition_url: string;
  a_url: string;
  b_url: string;
  voted: Slot | null;
}

export interface PairsResponse {
  pairs: PairItem[];
  total: number;
}

export interface VotesResponse {
  votes: Record<string, Slot>;
}

export type Transport = (url: string, init?: RequestInit) => Promise<Response>;

const SESSION_KEY = "annotate-ui.session";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export class LabelServeClient {
  private session: string | null;

  constructor(
    public readonly baseUrl: string,
    private readonly transport: Transport = (url, init) => fetch(url, init),
    private readonly storage: Storage = window.localStorage,
  ) {
    this.session = storage.getItem(SESSION_KEY);
  }

  /** Current session token, once the server has issued one. */
  sessionToken(): string | null {
    return this.session;
  }

  private async request<T>(path: string, init: RequestInit = {}): Promise<T> {
    const headers = new Headers(init.headers);
    if (this.session !== null) {
      headers.set("X-Session", this.session);
    }
    if (init.body !== undefined) {
      headers.set("Content-Type", "application/json");
    }
    const response = await this.transport(this.baseUrl + path, {
      ...init,
      headers,
    });
    const token = response.headers.get("X-Session");
    if (token !== null && token !== this.session) {
      this.session = token;
      this.storage.setItem(SESSION_KEY, token);
    }
    if (!response.ok) {
      throw new ApiError(response.status, await response.text());
    }
    return (await response.json()) as T;
  }

  health(): Promise<HealthResponse> {
    return this.request<HealthResponse>("/");
  }

  queue(limit?: number): Promise<QueueResponse> {
    const suffix = limit === undefined ? "" : `?limit=${limit}`;
    return this.request<QueueResponse>(`/queue${suffix}`);
  }

  label(sampleId: string, label: ManualLabel): Promise<LabelResponse> {
    return this.request<LabelResponse>("/label", {
      method: "POST",
      body: JSON.stringify({ sample_id: sampleId, label }),
    });
  }

  pairs(limit?: number): Promise<PairsResponse> {
    const suffix = limit === undefined ? "" : `?limit=${limit}`;
    return this.request<PairsResponse>(`/pairs${suffix}`);
  }

  vote(pairId: string, winner: Slot): Promise<{ pair_id: string; winner: Slot }> {
    return this.request("/vote", {
      method: "POST",
      body: JSON.stringify({ pair_id: pairId, winner }),
    });
  }

  votes(): Promise<VotesResponse> {
    return this.request<VotesResponse>("/votes");
  }

  /** Absolute URL for a server-relative image path. */
  imageUrl(path: string): string {
    return this.baseUrl + path;
  }
}
