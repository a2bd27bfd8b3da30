// DOM wiring for the console. All data shown here comes straight from
// response fields; the only client-side computation is layout.

import {
  ApiError,
  Client,
  Health,
  MasksResponse,
  TrialSummary,
} from "./api.js";
import { evidenceChart, mentionChart } from "./charts.js";
import { ProbeSession, replaySession } from "./session.js";
import { debounce, Gate } from "./util.js";

function el<T extends HTMLElement>(root: ParentNode, id: string): T {
  const node = root.querySelector(`#${id}`);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function line(parent: HTMLElement, className: string, text: string): HTMLElement {
  const div = document.createElement("div");
  div.className = className;
  div.textContent = text;
  parent.appendChild(div);
  return div;
}

function describeError(err: unknown): string {
  if (err instanceof ApiError) return `${err.code} (${err.status}): ${err.message}`;
  return err instanceof Error ? err.message : String(err);
}

export class Console {
  private readonly chatGate = new Gate();
  private readonly sweepGate = new Gate();
  private readonly replayGate = new Gate();
  private trialById = new Map<string, TrialSummary>();
  private readonly grid: number[];

  constructor(
    private readonly doc: Document,
    private readonly client: Client,
    private readonly session: ProbeSession,
    private readonly health: Health,
    private readonly trials: TrialSummary[],
    private readonly masks: MasksResponse,
  ) {
    for (const t of trials) this.trialById.set(t.trial_id, t);
    this.grid = [...health.beta_grid].sort((a, b) => a - b);
  }

  boot(): void {
    this.renderHealth();
    this.renderTrials();
    this.renderStimControls();
    this.wireChat();
    this.wireSessionButtons();
    if (this.trials.length > 0) this.selectTrial(this.trials[0]!.trial_id);
  }

  // ------------------------------------------------------------------
  private renderHealth(): void {
    const box = el<HTMLElement>(this.doc, "health");
    box.textContent =
      `service ${this.client.baseUrl || "(same origin)"} | ` +
      `version ${this.health.version} | phase ${this.health.phase} | ` +
      `checkpoint ${this.health.checkpoint_hash.slice(0, 12)} | ` +
      `${this.health.n_test_trials} probe trials | ` +
      `vocab ${this.health.vocab_size} | ${this.health.n_brain_tokens} brain tokens`;
  }

  private renderTrials(): void {
    const list = el<HTMLElement>(this.doc, "trial-list");
    list.textContent = "";
    for (const trial of this.trials) {
      const button = this.doc.createElement("button");
      button.className = "trial";
      button.dataset.trialId = trial.trial_id;
      button.textContent = `${trial.trial_id}  ${trial.caption_preview}`;
      button.addEventListener("click", () => this.selectTrial(trial.trial_id));
      list.appendChild(button);
    }
  }

  private selectTrial(trialId: string): void {
    this.session.trialId = trialId;
    this.session.reveal = false;
    for (const node of this.doc.querySelectorAll("button.trial")) {
      node.classList.toggle("selected", (node as HTMLElement).dataset.trialId === trialId);
    }
    const trial = this.trialById.get(trialId);
    el<HTMLElement>(this.doc, "chat-trial").textContent = trialId;
    const questions = el<HTMLElement>(this.doc, "question-suggestions");
    questions.textContent = "";
    for (const q of trial?.questions ?? []) {
      const button = this.doc.createElement("button");
      button.className = "suggestion";
      button.textContent = q;
      button.addEventListener("click", () => {
        el<HTMLInputElement>(this.doc, "question-input").value = q;
      });
      questions.appendChild(button);
    }
    this.renderGroundTruth();
  }

  private renderGroundTruth(): void {
    const box = el<HTMLElement>(this.doc, "ground-truth");
    const toggle = el<HTMLButtonElement>(this.doc, "reveal-toggle");
    toggle.textContent = this.session.reveal ? "hide ground truth" : "reveal ground truth";
    box.textContent = "";
    if (!this.session.reveal) {
      box.classList.add("hidden");
      return;
    }
    box.classList.remove("hidden");
    const trial = this.session.trialId ? this.trialById.get(this.session.trialId) : undefined;
    if (!trial) return;
    const truth = trial.ground_truth;
    line(box, "truth-row", `category: ${truth.category}`);
    line(box, "truth-row", `count: ${truth.count}`);
    line(box, "truth-row", `setting: ${truth.setting}`);
    line(box, "truth-row", `person present: ${truth.has_person}`);
    for (const caption of truth.captions) line(box, "truth-caption", caption);
  }

  // ------------------------------------------------------------------
  private renderStimControls(): void {
    const select = el<HTMLSelectElement>(this.doc, "mask-select");
    select.textContent = "";
    const none = this.doc.createElement("option");
    none.value = "";
    none.textContent = "no mask (beta stays 0)";
    select.appendChild(none);
    for (const mask of this.masks.masks) {
      const option = this.doc.createElement("option");
      option.value = mask.mask_id;
      option.textContent = `${mask.mask_id} (${mask.n_active} vertices, ${mask.source})`;
      select.appendChild(option);
    }
    const slider = el<HTMLInputElement>(this.doc, "beta-slider");
    select.addEventListener("change", () => {
      this.session.maskId = select.value === "" ? null : select.value;
      // A nonzero beta without a mask is not a valid request; park the
      // slider at 0 until a mask is chosen.
      slider.disabled = this.session.maskId === null;
      if (this.session.maskId === null) this.setBetaIndex(this.zeroIndex());
    });

    // The slider moves over the advertised grid itself: one notch per
    // grid value, no in-between betas.
    slider.min = "0";
    slider.max = String(this.grid.length - 1);
    slider.step = "1";
    slider.disabled = true;
    const commit = debounce((index: number) => this.setBetaIndex(index), 200);
    slider.addEventListener("input", () => {
      const index = Number(slider.value);
      el<HTMLElement>(this.doc, "beta-value").textContent = String(this.grid[index] ?? 0);
      commit(index);
    });
    this.setBetaIndex(this.zeroIndex());

    el<HTMLButtonElement>(this.doc, "sweep-button").addEventListener("click", () => {
      void this.runSweep();
    });
  }

  private zeroIndex(): number {
    const exact = this.grid.indexOf(0);
    return exact >= 0 ? exact : 0;
  }

  private setBetaIndex(index: number): void {
    const clamped = Math.min(this.grid.length - 1, Math.max(0, Math.round(index)));
    const beta = this.session.setBeta(this.grid[clamped] ?? 0);
    el<HTMLInputElement>(this.doc, "beta-slider").value = String(clamped);
    el<HTMLElement>(this.doc, "beta-value").textContent = String(beta);
  }

  private async runSweep(): Promise<void> {
    const trialId = this.session.trialId;
    const maskId = this.session.maskId;
    if (!trialId) return this.showError("sweep", "select a trial first", () => this.runSweep());
    if (!maskId) return this.showError("sweep", "select a mask first", () => this.runSweep());
    const button = el<HTMLButtonElement>(this.doc, "sweep-button");
    await this.sweepGate.run(async () => {
      button.disabled = true;
      try {
        const { data, elapsedMs } = await this.client.sweep({
          trial_id: trialId,
          mask_id: maskId,
          betas: this.health.beta_grid,
        });
        this.clearError("sweep");
        el<HTMLElement>(this.doc, "mention-chart").innerHTML = mentionChart(data.points);
        el<HTMLElement>(this.doc, "evidence-chart").innerHTML = evidenceChart(data.points);
        const log = el<HTMLElement>(this.doc, "sweep-log");
        log.textContent = "";
        line(
          log,
          "sweep-meta",
          `${data.points.length} grid points, watching [${data.evidence_tokens.join(", ")}]` +
            (elapsedMs === null ? "" : `, ${elapsedMs.toFixed(0)} ms server side`),
        );
        for (const point of data.points) {
          line(log, "sweep-row", `beta ${point.beta}: ${point.text}`);
        }
      } catch (err) {
        this.showError("sweep", describeError(err), () => this.runSweep());
      } finally {
        button.disabled = false;
      }
    });
  }

  // ------------------------------------------------------------------
  private wireChat(): void {
    const form = el<HTMLFormElement>(this.doc, "chat-form");
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      void this.sendQuestion();
    });
    el<HTMLButtonElement>(this.doc, "reveal-toggle").addEventListener("click", () => {
      this.session.reveal = !this.session.reveal;
      this.renderGroundTruth();
    });
  }

  private async sendQuestion(): Promise<void> {
    const input = el<HTMLInputElement>(this.doc, "question-input");
    const question = input.value.trim();
    const trialId = this.session.trialId;
    if (!question || !trialId) return;
    const button = el<HTMLButtonElement>(this.doc, "chat-send");
    await this.chatGate.run(async () => {
      button.disabled = true;
      try {
        const result = await this.client.ask({
          trial_id: trialId,
          question,
          beta: this.session.beta,
          mask_id: this.session.maskId,
          evidence_tokens: this.masks.default_evidence_tokens,
        });
        this.clearError("chat");
        const entry = this.session.recordAnswer(result);
        const historyBox = el<HTMLElement>(this.doc, "chat-history");
        const block = this.doc.createElement("div");
        block.className = "exchange";
        line(block, "question", `you: ${entry.question}`);
        line(block, "answer", `model: ${entry.answer}`);
        line(
          block,
          "meta",
          `caption score ${entry.caption_score.toFixed(3)} | beta ${entry.beta}` +
            (entry.mask_id ? ` on ${entry.mask_id}` : "") +
            (entry.evidence_aggregate_log === null
              ? ""
              : ` | log person evidence ${entry.evidence_aggregate_log.toFixed(3)}`) +
            (entry.elapsed_ms === null ? "" : ` | ${entry.elapsed_ms.toFixed(0)} ms`),
        );
        historyBox.appendChild(block);
        historyBox.scrollTop = historyBox.scrollHeight;
        input.value = "";
      } catch (err) {
        this.showError("chat", describeError(err), () => this.sendQuestion());
      } finally {
        button.disabled = false;
      }
    });
  }

  // ------------------------------------------------------------------
  private wireSessionButtons(): void {
    el<HTMLButtonElement>(this.doc, "export-button").addEventListener("click", () => {
      const text = this.session.exportText();
      const blob = new Blob([text], { type: "text/plain" });
      const anchor = this.doc.createElement("a");
      anchor.href = URL.createObjectURL(blob);
      anchor.download = "probe-session.txt";
      anchor.click();
      URL.revokeObjectURL(anchor.href);
    });

    const fileInput = el<HTMLInputElement>(this.doc, "replay-file");
    el<HTMLButtonElement>(this.doc, "replay-button").addEventListener("click", () => {
      fileInput.click();
    });
    fileInput.addEventListener("change", () => {
      const file = fileInput.files?.[0];
      if (file) void this.replayFromFile(file);
      fileInput.value = "";
    });
  }

  private async replayFromFile(file: File): Promise<void> {
    await this.replayGate.run(async () => {
      const status = el<HTMLElement>(this.doc, "replay-status");
      try {
        const text = await file.text();
        const parsed = ProbeSession.parseExport(text);
        status.textContent = `replaying ${parsed.entries.length} entries...`;
        const results = await replaySession(this.client, parsed.entries);
        this.clearError("session");
        const identical = results.filter((r) => r.identical).length;
        status.textContent = `replayed ${results.length} entries, ${identical} identical`;
        for (const r of results) {
          if (!r.identical) {
            line(
              status,
              "replay-diff",
              `'${r.entry.question}' now answers '${r.replayedAnswer}' (was '${r.entry.answer}')`,
            );
          }
        }
      } catch (err) {
        this.showError("session", describeError(err), () => this.replayFromFile(file));
      }
    });
  }

  // ------------------------------------------------------------------
  // Errors are surfaced verbatim with a retry button; nothing fails
  // silently.
  private showError(panel: string, message: string, retry: () => unknown): void {
    const banner = el<HTMLElement>(this.doc, `${panel}-error`);
    banner.textContent = "";
    banner.classList.remove("hidden");
    line(banner, "error-text", message);
    const button = this.doc.createElement("button");
    button.textContent = "retry";
    button.addEventListener("click", () => {
      this.clearError(panel);
      void retry();
    });
    banner.appendChild(button);
  }

  private clearError(panel: string): void {
    const banner = el<HTMLElement>(this.doc, `${panel}-error`);
    banner.textContent = "";
    banner.classList.add("hidden");
  }
}
