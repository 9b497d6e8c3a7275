// @vitest-environment jsdom
/** End-to-end: the real ranking service plus the real UI shell, driven by a
 * scripted agent that ranks candidates by what is visible on screen (how
 * close each rollout ends to the goal marker). Covers session completion,
 * submit gating, duplicate-index rejection, and the trace sparkline. */

import { spawn, ChildProcess } from "node:child_process";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { App } from "../src/app.js";
import { distance, finalPoint } from "../src/render.js";
import type { CandidatePayload, TaskView } from "../src/api.js";

const PYTHON = process.env.PYTHON ?? "python3";
let server: ChildProcess;
let base = "";

async function waitForServer(url: string, timeoutMs = 30_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    try {
      const resp = await fetch(url + "/api/session");
      if (resp.ok) return;
    } catch {
      /* not up yet */
    }
    await new Promise((r) => setTimeout(r, 150));
  }
  throw new Error("ranking service did not come up");
}

beforeAll(async () => {
  server = spawn(PYTHON, ["tests/support/serve_smoke.py", "3"], {
    cwd: process.cwd(),
    stdio: ["ignore", "pipe", "pipe"],
  });
  const port: number = await new Promise((resolve, reject) => {
    let buf = "";
    server.stdout!.on("data", (chunk) => {
      buf += String(chunk);
      const m = buf.match(/PORT (\d+)/);
      if (m) resolve(Number(m[1]));
    });
    server.on("exit", (code) => reject(new Error(`server exited early: ${code}`)));
    setTimeout(() => reject(new Error("no PORT line from server")), 20_000);
  });
  base = `http://127.0.0.1:${port}`;
  await waitForServer(base);
}, 60_000);

afterAll(() => {
  server?.kill("SIGKILL");
});

/** Rank what a human would see: rollouts ending nearest the goal first. */
function visualOrder(candidates: CandidatePayload[], task: TaskView): number[] {
  const goal = task.goal_position ?? [0, 0];
  const score = (c: CandidatePayload) => {
    const ends = c.trajectories.map((traj) => distance(finalPoint(traj), goal));
    return ends.reduce((a, b) => a + b, 0) / ends.length;
  };
  return [...candidates]
    .sort((a, b) => score(a) - score(b) || a.index - b.index)
    .map((c) => c.index);
}

async function waitForState(api: ApiClient, state: string, timeoutMs = 60_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    const session = await api.getSession();
    if (session.state === state) return;
    if (session.state === "aborted") throw new Error(`session aborted: ${session.error}`);
    await new Promise((r) => setTimeout(r, 100));
  }
  throw new Error(`timed out waiting for state ${state}`);
}

describe("end-to-end ranking session", () => {
  it("completes a T=3, m=6 session with gating, rejection, and sparkline", async () => {
    const api = new ApiClient(base);
    const root = document.createElement("div");
    document.body.appendChild(root);
    const app = new App(root, api, { pollMs: 100000, canvasSize: 60 });

    for (let iteration = 1; iteration <= 3; iteration++) {
      await waitForState(api, "awaiting_ranking");
      await app.tick();
      expect(app.session!.state).toBe("awaiting_ranking");
      expect(root.querySelectorAll(".candidate").length).toBe(6);
      expect(root.querySelectorAll(".slot").length).toBe(6);

      const submit = root.querySelector<HTMLButtonElement>('[data-el="submit"]')!;
      expect(submit.disabled).toBe(true); // nothing ranked yet

      // the server rejects malformed rankings outright
      const dup = await fetch(base + "/api/ranking", {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify([0, 0, 1, 2, 3, 4]),
      });
      expect(dup.status).toBe(400);

      const view = await api.getCandidates();
      expect(view).not.toBeNull();
      const order = visualOrder(view!.candidates, app.session!.task);

      // click cards in visual-quality order; gate must hold until the end
      for (let i = 0; i < order.length; i++) {
        expect(submit.disabled).toBe(true);
        const card = root.querySelector<HTMLElement>(`.candidate[data-index="${order[i]}"]`)!;
        card.dispatchEvent(new MouseEvent("click", { bubbles: true }));
      }
      expect(submit.disabled).toBe(false);
      await app.submit();

      await app.tick();
      const counter = root.querySelector('[data-el="iteration"]')!.textContent!;
      expect(counter).toContain(`${iteration} / 3`);
    }

    await waitForState(api, "finished");
    await app.tick();
    expect(root.querySelector('[data-el="status"]')!.textContent).toContain("finished");

    // sparkline reflects the revealed per-iteration returns
    const trace = await api.getTrace();
    expect(trace.iterations_done).toBe(3);
    expect(trace.return_history!.length).toBe(3);
    expect(root.querySelector('[data-el="sparkline"]')!.innerHTML).toContain("<path");
  }, 120_000);
});
