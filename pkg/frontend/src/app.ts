/** Application shell: polls the session, renders candidate rollouts, hosts
 * the drag-to-rank board, submits rankings, and tracks progress.
 *
 * All state transitions run through `tick()`, which the browser drives on
 * an interval and tests drive directly.
 */

import { ApiClient, CandidatePayload, RankingApi, SessionView } from "./api.js";
import { RankingBoard } from "./ranking.js";
import { drawCandidate } from "./render.js";
import { renderSparkline } from "./sparkline.js";

export interface AppOptions {
  pollMs?: number;
  canvasSize?: number;
}

export class App {
  readonly api: RankingApi;
  board: RankingBoard | null = null;
  loadedIteration = 0;
  session: SessionView | null = null;
  private candidates: CandidatePayload[] = [];
  private readonly pollMs: number;
  private readonly canvasSize: number;
  private timer: ReturnType<typeof setInterval> | null = null;
  private bannerTimer: ReturnType<typeof setTimeout> | null = null;
  private els: Record<string, HTMLElement> = {};

  constructor(private root: HTMLElement, api: RankingApi, opts: AppOptions = {}) {
    this.api = api;
    this.pollMs = opts.pollMs ?? 1000;
    this.canvasSize = opts.canvasSize ?? 220;
    this.buildSkeleton();
  }

  private buildSkeleton(): void {
    this.root.innerHTML = `
      <header>
        <h1>Candidate ranking</h1>
        <div id="task-hint" data-el="task-hint"></div>
        <div id="status" data-el="status">connecting…</div>
        <div id="iteration" data-el="iteration"></div>
        <div id="sparkline" data-el="sparkline" title="return over iterations"></div>
      </header>
      <div id="banner" data-el="banner" hidden></div>
      <main>
        <section>
          <h2>Candidates <small>(click or drag onto a rank slot)</small></h2>
          <div id="candidates" data-el="candidates"></div>
        </section>
        <section>
          <h2>Your ranking <small>(best first)</small></h2>
          <ol id="slots" data-el="slots"></ol>
          <button id="submit" data-el="submit" disabled>Submit ranking</button>
        </section>
      </main>`;
    for (const name of ["task-hint", "status", "iteration", "sparkline", "banner", "candidates", "slots", "submit"]) {
      this.els[name] = this.root.querySelector(`[data-el="${name}"]`) as HTMLElement;
    }
    this.els["submit"].addEventListener("click", () => void this.submit());
  }

  start(): void {
    if (this.timer !== null) return;
    void this.tick();
    this.timer = setInterval(() => void this.tick(), this.pollMs);
  }

  stop(): void {
    if (this.timer !== null) clearInterval(this.timer);
    this.timer = null;
  }

  /** One poll cycle; safe to call directly from tests. */
  async tick(): Promise<void> {
    let session: SessionView;
    try {
      session = await this.api.getSession();
    } catch {
      this.els["status"].textContent = "server unreachable, retrying…";
      return;
    }
    this.session = session;
    this.els["status"].textContent = this.statusText(session);
    this.els["iteration"].textContent =
      `iteration ${Math.max(session.rankings_submitted, session.iteration)} / ${session.total_iterations}`;
    if (session.task?.hint) this.els["task-hint"].textContent = session.task.hint;

    if (session.state === "awaiting_ranking" && session.iteration !== this.loadedIteration) {
      const view = await this.api.getCandidates();
      if (view) {
        this.loadedIteration = view.iteration;
        this.candidates = view.candidates;
        this.board = new RankingBoard(session.n_candidates, session.top_k);
        this.renderCandidates();
        this.renderSlots();
      }
    }
    if (session.state === "finished" || session.state === "aborted") {
      this.stop();
      this.els["candidates"].innerHTML = "";
      this.els["slots"].innerHTML = "";
    }

    try {
      const trace = await this.api.getTrace();
      if (trace.return_history && trace.return_history.length > 0) {
        renderSparkline(this.els["sparkline"], trace.return_history);
      }
    } catch {
      /* sparkline is best-effort */
    }
    this.updateSubmitGate();
  }

  private statusText(session: SessionView): string {
    switch (session.state) {
      case "awaiting_ranking":
        return "rank the candidates below";
      case "idle":
        return "evaluating candidates…";
      case "finished":
        return "tuning finished";
      case "aborted":
        return session.error ? `aborted: ${session.error}` : "session aborted";
      default:
        return session.state;
    }
  }

  private renderCandidates(): void {
    const host = this.els["candidates"];
    host.innerHTML = "";
    for (const payload of this.candidates) {
      const card = document.createElement("div");
      card.className = "candidate";
      card.dataset.index = String(payload.index);
      card.draggable = true;
      const canvas = document.createElement("canvas");
      canvas.width = this.canvasSize;
      canvas.height = this.canvasSize;
      card.appendChild(canvas);
      const label = document.createElement("div");
      label.className = "candidate-label";
      label.textContent =
        payload.mean_return !== undefined
          ? `candidate ${payload.index} (return ${payload.mean_return.toFixed(2)})`
          : `candidate ${payload.index}`;
      card.appendChild(label);
      if (this.session) drawCandidate(canvas, payload, this.session.task);
      card.addEventListener("click", () => {
        this.board?.assignNext(payload.index);
        this.renderSlots();
      });
      card.addEventListener("dragstart", (ev) => {
        ev.dataTransfer?.setData("text/plain", String(payload.index));
      });
      host.appendChild(card);
    }
  }

  renderSlots(): void {
    const host = this.els["slots"];
    host.innerHTML = "";
    if (!this.board) return;
    const placed = new Set(this.board.slotContents().filter((s) => s !== null));
    this.root.querySelectorAll<HTMLElement>(".candidate").forEach((card) => {
      const idx = Number(card.dataset.index);
      card.classList.toggle("placed", placed.has(idx));
    });
    this.board.slotContents().forEach((occupant, slot) => {
      const li = document.createElement("li");
      li.className = "slot" + (occupant === null ? " empty" : "");
      li.dataset.slot = String(slot);
      li.textContent = occupant === null ? `rank ${slot + 1}: drop here` : `rank ${slot + 1}: candidate ${occupant}`;
      if (occupant !== null) {
        li.title = "click to remove";
        li.addEventListener("click", () => {
          this.board?.remove(slot);
          this.renderSlots();
        });
      }
      li.addEventListener("dragover", (ev) => ev.preventDefault());
      li.addEventListener("drop", (ev) => {
        ev.preventDefault();
        const data = ev.dataTransfer?.getData("text/plain");
        if (data === undefined || data === "") return;
        this.board?.assign(Number(data), slot);
        this.renderSlots();
      });
      host.appendChild(li);
    });
    this.updateSubmitGate();
  }

  private updateSubmitGate(): void {
    const button = this.els["submit"] as HTMLButtonElement;
    const ready =
      this.session?.state === "awaiting_ranking" &&
      this.board !== null &&
      this.board.isComplete() &&
      !this.api.submissionInFlight;
    button.disabled = !ready;
  }

  async submit(): Promise<void> {
    if (!this.board || !this.board.isComplete() || this.api.submissionInFlight) return;
    this.updateSubmitGate();
    const result = await this.api.submitRanking(this.board.order());
    if (!result.ok) {
      this.showBanner(`submission rejected (${result.status}): ${result.message}`);
    } else {
      this.board = null;
      this.els["candidates"].innerHTML = "";
      this.els["slots"].innerHTML = "";
      this.els["status"].textContent = "ranking submitted, evaluating…";
    }
    this.updateSubmitGate();
    await this.tick();
  }

  showBanner(message: string): void {
    const banner = this.els["banner"];
    banner.textContent = message;
    banner.hidden = false;
    if (this.bannerTimer) clearTimeout(this.bannerTimer);
    this.bannerTimer = setTimeout(() => {
      banner.hidden = true;
    }, 4000);
  }
}

export function mount(root: HTMLElement, base = ""): App {
  const app = new App(root, new ApiClient(base));
  app.start();
  return app;
}
