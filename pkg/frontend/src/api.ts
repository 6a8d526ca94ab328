import type {
  CheckpointInfo,
  ImagePage,
  SessionState,
  WireRef,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public error: string,
    public detail: string,
  ) {
    super(`${error}: ${detail}`);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client over the session service HTTP JSON API. */
export class ApiClient {
  constructor(
    private base: string = "",
    private fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.base + path, init);
    const body = await response.json().catch(() => ({}));
    if (!response.ok) {
      throw new ApiError(
        response.status,
        (body as { error?: string }).error ?? "error",
        (body as { detail?: string }).detail ?? response.statusText,
      );
    }
    return body as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  health(): Promise<{ status: string }> {
    return this.request("/health");
  }

  async checkpoints(): Promise<CheckpointInfo[]> {
    const body = await this.request<{ items: CheckpointInfo[] }>("/checkpoints");
    return body.items;
  }

  createSession(checkpointId: string, nSeeds = 3, rngSeed?: number): Promise<SessionState> {
    return this.post("/sessions", {
      checkpoint_id: checkpointId,
      n_seeds: nSeeds,
      ...(rngSeed === undefined ? {} : { rng_seed: rngSeed }),
    });
  }

  getSession(sessionId: string): Promise<SessionState> {
    return this.request(`/sessions/${sessionId}`);
  }

  addConstraint(sessionId: string, pos: WireRef, neg: WireRef): Promise<SessionState> {
    return this.post(`/sessions/${sessionId}/constraints`, { pos, neg });
  }

  undo(sessionId: string): Promise<SessionState> {
    return this.post(`/sessions/${sessionId}/undo`, {});
  }

  listImages(offset = 0, limit = 60): Promise<ImagePage> {
    return this.request(`/images?offset=${offset}&limit=${limit}`);
  }
}
