// Typed client for the probe service. Every response passes through a
// parse function that checks the fields the console will display, so a
// contract drift fails loudly here instead of rendering blanks.

export interface Health {
  status: string;
  version: string;
  checkpoint_hash: string;
  phase: string;
  n_trials: number;
  n_test_trials: number;
  vocab_size: number;
  n_brain_tokens: number;
  beta_grid: number[];
}

export interface TrialGroundTruth {
  revealable: boolean;
  category: string;
  count: number;
  setting: string;
  has_person: boolean;
  captions: string[];
}

export interface TrialSummary {
  trial_id: string;
  caption_preview: string;
  questions: string[];
  ground_truth: TrialGroundTruth;
}

export interface MaskInfo {
  mask_id: string;
  fraction: number;
  n_active: number;
  source: string;
}

export interface MasksResponse {
  masks: MaskInfo[];
  default_evidence_tokens: string[];
}

export interface Evidence {
  tokens: string[];
  per_step: number[];
  aggregate_log: number;
}

export interface AskRequest {
  trial_id: string;
  question: string;
  beta?: number;
  mask_id?: string | null;
  evidence_tokens?: string[];
  generation?: Record<string, number>;
}

export interface AskResponse {
  trial_id: string;
  question: string;
  beta: number;
  mask_id: string | null;
  text: string;
  caption_score: number;
  evidence?: Evidence;
}

export interface SweepRequest {
  trial_id: string;
  mask_id: string;
  betas: number[];
  question?: string;
}

export interface SweepPoint {
  beta: number;
  text: string;
  mentions_person: boolean;
  evidence_aggregate_log: number;
}

export interface SweepResponse {
  trial_id: string;
  mask_id: string;
  question: string;
  evidence_tokens: string[];
  points: SweepPoint[];
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

function need(raw: unknown, keys: string[], where: string): Record<string, unknown> {
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    throw new Error(`${where}: expected an object`);
  }
  const rec = raw as Record<string, unknown>;
  for (const key of keys) {
    if (!(key in rec)) throw new Error(`${where}: missing field '${key}'`);
  }
  return rec;
}

export function parseHealth(raw: unknown): Health {
  const rec = need(
    raw,
    [
      "status",
      "version",
      "checkpoint_hash",
      "phase",
      "n_trials",
      "n_test_trials",
      "vocab_size",
      "n_brain_tokens",
      "beta_grid",
    ],
    "health",
  );
  if (!Array.isArray(rec.beta_grid) || rec.beta_grid.length === 0) {
    throw new Error("health: beta_grid must be a non-empty array");
  }
  return rec as unknown as Health;
}

export function parseTrials(raw: unknown): TrialSummary[] {
  const rec = need(raw, ["trials"], "trials");
  if (!Array.isArray(rec.trials)) throw new Error("trials: not an array");
  return rec.trials.map((row, i) => {
    const t = need(row, ["trial_id", "caption_preview", "questions", "ground_truth"], `trials[${i}]`);
    need(
      t.ground_truth,
      ["revealable", "category", "count", "setting", "has_person", "captions"],
      `trials[${i}].ground_truth`,
    );
    return t as unknown as TrialSummary;
  });
}

export function parseMasks(raw: unknown): MasksResponse {
  const rec = need(raw, ["masks", "default_evidence_tokens"], "masks");
  if (!Array.isArray(rec.masks)) throw new Error("masks: not an array");
  rec.masks.forEach((m, i) => need(m, ["mask_id", "fraction", "n_active", "source"], `masks[${i}]`));
  return rec as unknown as MasksResponse;
}

export function parseAsk(raw: unknown): AskResponse {
  const rec = need(
    raw,
    ["trial_id", "question", "beta", "mask_id", "text", "caption_score"],
    "ask",
  );
  if ("evidence" in rec && rec.evidence !== undefined) {
    need(rec.evidence, ["tokens", "per_step", "aggregate_log"], "ask.evidence");
  }
  return rec as unknown as AskResponse;
}

export function parseSweep(raw: unknown): SweepResponse {
  const rec = need(raw, ["trial_id", "mask_id", "question", "evidence_tokens", "points"], "sweep");
  if (!Array.isArray(rec.points)) throw new Error("sweep: points not an array");
  rec.points.forEach((p, i) =>
    need(p, ["beta", "text", "mentions_person", "evidence_aggregate_log"], `sweep.points[${i}]`),
  );
  return rec as unknown as SweepResponse;
}

// The slice of fetch the client needs; narrow so tests can hand in plain
// objects without pulling DOM types into node.
export interface FetchResponse {
  ok: boolean;
  status: number;
  statusText: string;
  headers: { get(name: string): string | null };
  json(): Promise<unknown>;
}
export type FetchLike = (url: string, init?: RequestInit) => Promise<FetchResponse>;

export interface Timed<T> {
  data: T;
  elapsedMs: number | null;
}

export class Client {
  constructor(
    readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<{ body: unknown; elapsedMs: number | null }> {
    const res = await this.fetchFn(`${this.baseUrl}${path}`, init);
    let body: unknown = null;
    try {
      body = await res.json();
    } catch {
      body = null;
    }
    if (!res.ok) {
      const rec = (body ?? {}) as { code?: string; message?: string };
      throw new ApiError(res.status, rec.code ?? "unknown_error", rec.message ?? res.statusText);
    }
    const header = res.headers.get("X-Elapsed-Ms");
    const elapsedMs = header === null ? null : Number(header);
    return { body, elapsedMs: Number.isFinite(elapsedMs as number) ? elapsedMs : null };
  }

  private post(path: string, payload: unknown): Promise<{ body: unknown; elapsedMs: number | null }> {
    return this.request(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  async health(): Promise<Health> {
    return parseHealth((await this.request("/api/health")).body);
  }

  async trials(): Promise<TrialSummary[]> {
    return parseTrials((await this.request("/api/trials")).body);
  }

  async masks(): Promise<MasksResponse> {
    return parseMasks((await this.request("/api/masks")).body);
  }

  async ask(req: AskRequest): Promise<Timed<AskResponse>> {
    const { body, elapsedMs } = await this.post("/api/ask", req);
    return { data: parseAsk(body), elapsedMs };
  }

  async sweep(req: SweepRequest): Promise<Timed<SweepResponse>> {
    const { body, elapsedMs } = await this.post("/api/sweep", req);
    return { data: parseSweep(body), elapsedMs };
  }
}
