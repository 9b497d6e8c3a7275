/** Typed client for the ranking-service JSON API.
 *
 * Network failures retry with exponential backoff; HTTP error statuses are
 * returned to the caller (they carry protocol meaning: 404 no open query,
 * 409 wrong state, 400 bad ranking). Only one ranking submission can be in
 * flight at a time, so a double-click can never double-submit.
 */

export interface TaskView {
  family: string;
  task_index: number;
  horizon: number;
  task_param: number[];
  goal_direction?: [number, number];
  target_velocity?: number;
  goal_position?: number[];
  hint?: string;
}

export interface SessionView {
  state: "idle" | "awaiting_ranking" | "finished" | "aborted";
  iteration: number;
  total_iterations: number;
  n_candidates: number;
  top_k: number;
  reveal_returns: boolean;
  task: TaskView;
  rankings_submitted: number;
  error: string | null;
}

export interface CandidatePayload {
  index: number;
  trajectories: number[][][];
  mean_return?: number;
  episode_returns?: number[];
}

export interface CandidatesView {
  iteration: number;
  candidates: CandidatePayload[];
}

export interface TraceView {
  iterations_done: number;
  total_iterations: number;
  state: string;
  return_history?: number[];
  meta?: Record<string, unknown>;
}

export interface SubmitResult {
  ok: boolean;
  status: number;
  message: string;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** What the app shell needs from a client (real or scripted). */
export interface RankingApi {
  getSession(): Promise<SessionView>;
  getCandidates(): Promise<CandidatesView | null>;
  submitRanking(order: number[]): Promise<SubmitResult>;
  getTrace(): Promise<TraceView>;
  abort(): Promise<void>;
  readonly submissionInFlight: boolean;
}

const sleep = (ms: number) => new Promise((resolve) => setTimeout(resolve, ms));

export class ApiClient implements RankingApi {
  private submitting = false;

  constructor(
    private base = "",
    private fetchFn: FetchLike = (...args) => fetch(...args),
    private retries = 3,
    private backoffMs = 200,
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    let lastError: unknown;
    for (let attempt = 0; attempt <= this.retries; attempt++) {
      try {
        return await this.fetchFn(this.base + path, init);
      } catch (err) {
        lastError = err; // network-level failure only; retry with backoff
        if (attempt < this.retries) await sleep(this.backoffMs * 2 ** attempt);
      }
    }
    throw lastError;
  }

  async getSession(): Promise<SessionView> {
    const resp = await this.request("/api/session");
    return (await resp.json()) as SessionView;
  }

  /** null when no query is awaiting a ranking (404). */
  async getCandidates(): Promise<CandidatesView | null> {
    const resp = await this.request("/api/candidates");
    if (resp.status === 404) return null;
    return (await resp.json()) as CandidatesView;
  }

  get submissionInFlight(): boolean {
    return this.submitting;
  }

  async submitRanking(order: number[]): Promise<SubmitResult> {
    if (this.submitting) {
      return { ok: false, status: 0, message: "a submission is already in flight" };
    }
    this.submitting = true;
    try {
      const resp = await this.request("/api/ranking", {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(order),
      });
      const body = (await resp.json()) as { message?: string };
      return { ok: resp.status === 200, status: resp.status, message: body.message ?? "" };
    } finally {
      this.submitting = false;
    }
  }

  async getTrace(): Promise<TraceView> {
    const resp = await this.request("/api/trace");
    return (await resp.json()) as TraceView;
  }

  async abort(): Promise<void> {
    await this.request("/api/abort", { method: "POST" });
  }
}
