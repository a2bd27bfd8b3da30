// Probe session state: the selected trial, stimulation settings, and an
// append-only chat history that can be exported as a structured text file
// and replayed against the same service.

import type { AskResponse, Client, Timed } from "./api.js";

export interface ChatEntry {
  trial_id: string;
  question: string;
  answer: string;
  beta: number;
  mask_id: string | null;
  caption_score: number;
  evidence_aggregate_log: number | null;
  elapsed_ms: number | null;
}

export interface SessionMeta {
  service: string;
  exported: string;
  entries: number;
}

export const EXPORT_HEADER = "braintext probe session v1";

export class ProbeSession {
  private readonly history: ChatEntry[] = [];
  readonly betaMin: number;
  readonly betaMax: number;
  trialId: string | null = null;
  beta = 0;
  maskId: string | null = null;
  reveal = false;

  constructor(
    readonly service: string,
    readonly betaGrid: number[],
  ) {
    if (betaGrid.length === 0) throw new Error("empty beta grid");
    this.betaMin = Math.min(...betaGrid);
    this.betaMax = Math.max(...betaGrid);
  }

  // Invariant: beta stays within the service-advertised bounds.
  clampBeta(value: number): number {
    if (!Number.isFinite(value)) return 0;
    return Math.min(this.betaMax, Math.max(this.betaMin, value));
  }

  setBeta(value: number): number {
    this.beta = this.clampBeta(value);
    return this.beta;
  }

  // Invariant: history is append-only; there is no edit or remove path.
  record(entry: ChatEntry): void {
    this.history.push({ ...entry });
  }

  recordAnswer(result: Timed<AskResponse>): ChatEntry {
    const data = result.data;
    const entry: ChatEntry = {
      trial_id: data.trial_id,
      question: data.question,
      answer: data.text,
      beta: data.beta,
      mask_id: data.mask_id,
      caption_score: data.caption_score,
      evidence_aggregate_log: data.evidence ? data.evidence.aggregate_log : null,
      elapsed_ms: result.elapsedMs,
    };
    this.record(entry);
    return entry;
  }

  get entries(): readonly ChatEntry[] {
    return this.history;
  }

  exportText(now: () => string = () => new Date().toISOString()): string {
    const lines = [
      EXPORT_HEADER,
      `service: ${this.service}`,
      `exported: ${now()}`,
      `entries: ${this.history.length}`,
      "",
    ];
    for (const entry of this.history) lines.push(JSON.stringify(entry));
    return lines.join("\n") + "\n";
  }

  static parseExport(text: string): { meta: SessionMeta; entries: ChatEntry[] } {
    const lines = text.split("\n");
    if (lines[0] !== EXPORT_HEADER) {
      throw new Error(`not a session export (expected '${EXPORT_HEADER}')`);
    }
    const meta: Record<string, string> = {};
    let i = 1;
    for (; i < lines.length; i++) {
      const line = lines[i] ?? "";
      if (line === "") {
        i++;
        break;
      }
      const sep = line.indexOf(": ");
      if (sep < 0) throw new Error(`bad meta line: ${line}`);
      meta[line.slice(0, sep)] = line.slice(sep + 2);
    }
    const entries: ChatEntry[] = [];
    for (; i < lines.length; i++) {
      const line = (lines[i] ?? "").trim();
      if (line === "") continue;
      const raw = JSON.parse(line) as Record<string, unknown>;
      for (const key of ["trial_id", "question", "answer", "beta", "mask_id"]) {
        if (!(key in raw)) throw new Error(`entry missing field '${key}'`);
      }
      entries.push(raw as unknown as ChatEntry);
    }
    const declared = Number(meta["entries"]);
    if (Number.isFinite(declared) && declared !== entries.length) {
      throw new Error(`export declares ${declared} entries, found ${entries.length}`);
    }
    return {
      meta: {
        service: meta["service"] ?? "",
        exported: meta["exported"] ?? "",
        entries: entries.length,
      },
      entries,
    };
  }
}

export interface ReplayResult {
  entry: ChatEntry;
  replayedAnswer: string;
  identical: boolean;
}

// Re-ask every exported question with its recorded beta and mask; against
// the same server and checkpoint the answers must come back identical.
export async function replaySession(
  client: Client,
  entries: readonly ChatEntry[],
): Promise<ReplayResult[]> {
  const results: ReplayResult[] = [];
  for (const entry of entries) {
    const { data } = await client.ask({
      trial_id: entry.trial_id,
      question: entry.question,
      beta: entry.beta,
      mask_id: entry.mask_id,
    });
    results.push({
      entry,
      replayedAnswer: data.text,
      identical: data.text === entry.answer,
    });
  }
  return results;
}
