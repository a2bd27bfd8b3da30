// Client tests run against the shared fixture bodies, so the shapes the
// console expects are exactly the shapes the service side asserts too.

import { describe, expect, it } from "vitest";
import fixture from "../shared/api-fixture.json";
import {
  ApiError,
  Client,
  FetchLike,
  FetchResponse,
  parseAsk,
  parseHealth,
  parseMasks,
  parseSweep,
  parseTrials,
} from "../src/api.js";

interface Call {
  url: string;
  init?: RequestInit;
}

function jsonResponse(
  body: unknown,
  opts: { status?: number; headers?: Record<string, string> } = {},
): FetchResponse {
  const status = opts.status ?? 200;
  const headers = opts.headers ?? {};
  return {
    ok: status >= 200 && status < 300,
    status,
    statusText: status === 200 ? "OK" : "Error",
    headers: { get: (name: string) => headers[name] ?? null },
    json: () => Promise.resolve(body),
  };
}

function mockClient(
  respond: (url: string, init?: RequestInit) => FetchResponse,
): { client: Client; calls: Call[] } {
  const calls: Call[] = [];
  const fetchFn: FetchLike = (url, init) => {
    calls.push({ url, init });
    return Promise.resolve(respond(url, init));
  };
  return { client: new Client("http://svc", fetchFn), calls };
}

describe("parse validators on fixture bodies", () => {
  it("accepts every fixture body", () => {
    const health = parseHealth(fixture.health);
    expect(health.checkpoint_hash).toHaveLength(64);
    expect(health.beta_grid.length).toBeGreaterThan(0);

    const trials = parseTrials(fixture.trials);
    expect(trials.length).toBeGreaterThan(0);
    expect(trials[0]!.ground_truth.revealable).toBe(true);

    const masks = parseMasks(fixture.masks);
    expect(masks.masks.map((m) => m.mask_id)).toContain("face-top1pct");
    expect(masks.default_evidence_tokens).toContain("person");

    const ask = parseAsk(fixture.ask);
    expect(ask.evidence!.per_step.length).toBeGreaterThan(0);
    expect(parseAsk(fixture.ask_stimulated).mask_id).toBe("face-top5pct");

    const sweep = parseSweep(fixture.sweep);
    expect(sweep.points.length).toBe(3);
  });

  it("rejects missing fields loudly", () => {
    const { beta_grid: _drop, ...broken } = fixture.health;
    expect(() => parseHealth(broken)).toThrow(/beta_grid/);
    expect(() => parseHealth({ ...fixture.health, beta_grid: [] })).toThrow(/non-empty/);
    expect(() => parseAsk({ ...fixture.ask, text: undefined, caption_score: 1 })).not.toThrow();
    const askNoText: Record<string, unknown> = { ...fixture.ask };
    delete askNoText["text"];
    expect(() => parseAsk(askNoText)).toThrow(/'text'/);
    const badPoint = {
      ...fixture.sweep,
      points: [{ beta: 0, text: "x", mentions_person: false }],
    };
    expect(() => parseSweep(badPoint)).toThrow(/evidence_aggregate_log/);
    expect(() => parseTrials({ trials: [{ trial_id: "t" }] })).toThrow(/caption_preview/);
    expect(() => parseMasks({ masks: "nope" })).toThrow();
    expect(() => parseHealth(null)).toThrow(/expected an object/);
  });

  it("accepts an ask body without evidence", () => {
    const bare: Record<string, unknown> = { ...fixture.ask };
    delete bare["evidence"];
    expect(parseAsk(bare).evidence).toBeUndefined();
  });
});

describe("Client", () => {
  it("hits documented routes with the base url prefixed", async () => {
    const { client, calls } = mockClient((url) => {
      if (url.endsWith("/api/health")) return jsonResponse(fixture.health);
      if (url.endsWith("/api/trials")) return jsonResponse(fixture.trials);
      if (url.endsWith("/api/masks")) return jsonResponse(fixture.masks);
      throw new Error(`unexpected ${url}`);
    });
    await client.health();
    await client.trials();
    await client.masks();
    expect(calls.map((c) => c.url)).toEqual([
      "http://svc/api/health",
      "http://svc/api/trials",
      "http://svc/api/masks",
    ]);
  });

  it("posts ask as json and captures X-Elapsed-Ms", async () => {
    const { client, calls } = mockClient(() =>
      jsonResponse(fixture.ask, { headers: { "X-Elapsed-Ms": "12.5" } }),
    );
    const req = { trial_id: "t00052", question: "How many horses are there?", beta: 0 };
    const result = await client.ask(req);
    expect(result.elapsedMs).toBe(12.5);
    expect(result.data.text).toBe((fixture.ask as { text: string }).text);
    const call = calls[0]!;
    expect(call.init?.method).toBe("POST");
    expect((call.init?.headers as Record<string, string>)["content-type"]).toBe("application/json");
    expect(JSON.parse(call.init?.body as string)).toEqual(req);
  });

  it("returns a null elapsed time when the header is absent or junk", async () => {
    const absent = mockClient(() => jsonResponse(fixture.ask));
    expect((await absent.client.ask({ trial_id: "t", question: "q" })).elapsedMs).toBeNull();
    const junk = mockClient(() =>
      jsonResponse(fixture.ask, { headers: { "X-Elapsed-Ms": "soon" } }),
    );
    expect((await junk.client.ask({ trial_id: "t", question: "q" })).elapsedMs).toBeNull();
  });

  it("maps error bodies to ApiError with the verbatim message", async () => {
    const { client } = mockClient(() =>
      jsonResponse(fixture.error.body, { status: fixture.error.status }),
    );
    const err = await client.ask({ trial_id: "nope", question: "q" }).catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(404);
    expect(err.code).toBe("unknown_trial");
    expect(err.message).toBe(fixture.error.body.message);
  });

  it("falls back to statusText when the error body is not json", async () => {
    const { client } = mockClient(() => ({
      ok: false,
      status: 502,
      statusText: "Bad Gateway",
      headers: { get: () => null },
      json: () => Promise.reject(new Error("not json")),
    }));
    const err = await client.health().catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.code).toBe("unknown_error");
    expect(err.message).toBe("Bad Gateway");
  });

  it("posts the sweep request body unchanged", async () => {
    const { client, calls } = mockClient(() => jsonResponse(fixture.sweep));
    const req = {
      trial_id: fixture.sweep.trial_id,
      mask_id: "face-top5pct",
      betas: [-0.5, 0.0, 0.5],
    };
    const result = await client.sweep(req);
    expect(result.data.points.map((p) => p.beta)).toEqual([-0.5, 0.0, 0.5]);
    expect(JSON.parse(calls[0]!.init?.body as string)).toEqual(req);
  });
});
