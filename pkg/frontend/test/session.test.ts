import { describe, expect, it } from "vitest";
import fixture from "../shared/api-fixture.json";
import { AskResponse, Client, FetchLike } from "../src/api.js";
import { ChatEntry, EXPORT_HEADER, ProbeSession, replaySession } from "../src/session.js";

const GRID = fixture.health.beta_grid;

function entry(overrides: Partial<ChatEntry> = {}): ChatEntry {
  return {
    trial_id: "t00052",
    question: "How many horses are there?",
    answer: "There are 3 horses.",
    beta: 0,
    mask_id: null,
    caption_score: 0.5,
    evidence_aggregate_log: -3.2,
    elapsed_ms: 11.0,
    ...overrides,
  };
}

describe("ProbeSession", () => {
  it("clamps beta to the advertised grid bounds", () => {
    const s = new ProbeSession("http://svc", GRID);
    expect(s.betaMin).toBe(Math.min(...GRID));
    expect(s.betaMax).toBe(Math.max(...GRID));
    expect(s.clampBeta(0.3)).toBe(0.3);
    expect(s.clampBeta(99)).toBe(s.betaMax);
    expect(s.clampBeta(-99)).toBe(s.betaMin);
    expect(s.clampBeta(Number.NaN)).toBe(0);
    expect(s.clampBeta(Number.POSITIVE_INFINITY)).toBe(0);
    expect(s.setBeta(1.0)).toBe(1.0);
    expect(s.beta).toBe(1.0);
  });

  it("rejects an empty beta grid", () => {
    expect(() => new ProbeSession("x", [])).toThrow(/empty/);
  });

  it("keeps history append-only and copies entries on record", () => {
    const s = new ProbeSession("http://svc", GRID);
    const first = entry();
    s.record(first);
    first.answer = "mutated after the fact";
    s.record(entry({ question: "Is there a person in this image?" }));
    expect(s.entries.length).toBe(2);
    expect(s.entries[0]!.answer).toBe("There are 3 horses.");
    // No removal or edit API exists; the readonly view is the only access.
    expect((s as unknown as { pop?: unknown }).pop).toBeUndefined();
  });

  it("records an answer from a timed ask response", () => {
    const s = new ProbeSession("http://svc", GRID);
    const data = fixture.ask as unknown as AskResponse;
    const recorded = s.recordAnswer({ data, elapsedMs: 7.25 });
    expect(recorded.answer).toBe(data.text);
    expect(recorded.caption_score).toBe(data.caption_score);
    expect(recorded.evidence_aggregate_log).toBe(data.evidence!.aggregate_log);
    expect(recorded.elapsed_ms).toBe(7.25);
    const bare = { ...data } as Record<string, unknown>;
    delete bare["evidence"];
    const second = s.recordAnswer({ data: bare as unknown as AskResponse, elapsedMs: null });
    expect(second.evidence_aggregate_log).toBeNull();
    expect(second.elapsed_ms).toBeNull();
  });

  it("round-trips export and parse", () => {
    const s = new ProbeSession("http://svc", GRID);
    s.record(entry());
    s.record(entry({ question: "What is the setting?", answer: "A beach." }));
    const text = s.exportText(() => "2026-08-22T00:00:00Z");
    expect(text.startsWith(EXPORT_HEADER + "\n")).toBe(true);
    expect(text).toContain("service: http://svc");
    expect(text).toContain("entries: 2");
    expect(text.endsWith("\n")).toBe(true);

    const parsed = ProbeSession.parseExport(text);
    expect(parsed.meta.service).toBe("http://svc");
    expect(parsed.meta.exported).toBe("2026-08-22T00:00:00Z");
    expect(parsed.entries).toEqual(s.entries);
  });

  it("rejects exports with a wrong header or inconsistent count", () => {
    expect(() => ProbeSession.parseExport("some other file\n")).toThrow(/not a session export/);
    const s = new ProbeSession("http://svc", GRID);
    s.record(entry());
    const text = s.exportText(() => "now").replace("entries: 1", "entries: 3");
    expect(() => ProbeSession.parseExport(text)).toThrow(/declares 3 entries, found 1/);
  });

  it("rejects entries missing required fields", () => {
    const text = [EXPORT_HEADER, "entries: 1", "", '{"trial_id": "t", "question": "q"}', ""].join(
      "\n",
    );
    expect(() => ProbeSession.parseExport(text)).toThrow(/'answer'/);
  });
});

describe("replaySession", () => {
  function scriptedClient(answers: Record<string, string>): { client: Client; bodies: unknown[] } {
    const bodies: unknown[] = [];
    const fetchFn: FetchLike = (_url, init) => {
      const req = JSON.parse(init?.body as string) as { question: string };
      bodies.push(req);
      const body: AskResponse = {
        trial_id: "t00052",
        question: req.question,
        beta: 0,
        mask_id: null,
        text: answers[req.question] ?? "?",
        caption_score: 0.5,
      };
      return Promise.resolve({
        ok: true,
        status: 200,
        statusText: "OK",
        headers: { get: () => null },
        json: () => Promise.resolve(body),
      });
    };
    return { client: new Client("http://svc", fetchFn), bodies };
  }

  it("re-asks each entry and flags mismatches", async () => {
    const entries = [
      entry({ question: "q1", answer: "stable" }),
      entry({ question: "q2", answer: "drifted", beta: 0.5, mask_id: "face-top1pct" }),
    ];
    const { client, bodies } = scriptedClient({ q1: "stable", q2: "something else" });
    const results = await replaySession(client, entries);
    expect(results.map((r) => r.identical)).toEqual([true, false]);
    expect(results[1]!.replayedAnswer).toBe("something else");
    // The replay resends the recorded stimulation settings untouched.
    expect(bodies[1]).toEqual({
      trial_id: "t00052",
      question: "q2",
      beta: 0.5,
      mask_id: "face-top1pct",
    });
  });
});
