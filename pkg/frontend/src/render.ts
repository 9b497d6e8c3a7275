/** Candidate rollout rendering: pure geometry plus a thin canvas layer.
 *
 * Geometry (bounds, projection, path metrics) is side-effect free and
 * deterministic for a given payload, which is what the snapshot tests pin.
 * Canvas drawing degrades to a no-op when a 2d context is unavailable.
 */

import type { CandidatePayload, TaskView } from "./api.js";

export interface ViewBox {
  minX: number;
  maxX: number;
  minY: number;
  maxY: number;
}

export type Point = [number, number];

export function trajectoryBounds(trajectories: number[][][], extraPoints: number[][] = []): ViewBox {
  let minX = Infinity, maxX = -Infinity, minY = Infinity, maxY = -Infinity;
  const eat = (x: number, y: number) => {
    if (x < minX) minX = x;
    if (x > maxX) maxX = x;
    if (y < minY) minY = y;
    if (y > maxY) maxY = y;
  };
  for (const traj of trajectories) for (const [x, y] of traj) eat(x, y);
  for (const [x, y] of extraPoints) eat(x, y);
  if (!Number.isFinite(minX)) return { minX: -1, maxX: 1, minY: -1, maxY: 1 };
  // avoid a degenerate box for stationary rollouts
  if (maxX - minX < 1e-9) { minX -= 0.5; maxX += 0.5; }
  if (maxY - minY < 1e-9) { minY -= 0.5; maxY += 0.5; }
  return { minX, maxX, minY, maxY };
}

/** Map data points into pixel space (y axis flipped), padded. */
export function projectPolyline(
  points: number[][], box: ViewBox, width: number, height: number, pad = 10,
): Point[] {
  const sx = (width - 2 * pad) / (box.maxX - box.minX);
  const sy = (height - 2 * pad) / (box.maxY - box.minY);
  return points.map(([x, y]) => [
    pad + (x - box.minX) * sx,
    height - pad - (y - box.minY) * sy,
  ]);
}

export function pathLength(points: number[][]): number {
  let total = 0;
  for (let i = 1; i < points.length; i++) {
    const dx = points[i][0] - points[i - 1][0];
    const dy = points[i][1] - points[i - 1][1];
    total += Math.hypot(dx, dy);
  }
  return total;
}

export function finalPoint(trajectory: number[][]): Point {
  const last = trajectory[trajectory.length - 1];
  return [last[0], last[1]];
}

export function distance(a: number[], b: number[]): number {
  return Math.hypot(a[0] - b[0], a[1] - b[1]);
}

/** Context markers a human needs: goal point, direction arrow, or target line. */
export function taskMarkers(task: TaskView): { goal?: Point; direction?: Point; targetY?: number } {
  if (task.goal_position) return { goal: [task.goal_position[0], task.goal_position[1]] };
  if (task.goal_direction) return { direction: [task.goal_direction[0], task.goal_direction[1]] };
  if (task.target_velocity !== undefined) return { targetY: task.target_velocity };
  return {};
}

const EPISODE_COLORS = ["#2563eb", "#0891b2", "#7c3aed", "#059669"];

export function drawCandidate(
  canvas: HTMLCanvasElement, payload: CandidatePayload, task: TaskView,
): void {
  const ctx = canvas.getContext && (canvas.getContext("2d") as CanvasRenderingContext2D | null);
  if (!ctx) return; // headless environments render nothing
  const { width, height } = canvas;
  const markers = taskMarkers(task);
  const extra: number[][] = [];
  if (markers.goal) extra.push(markers.goal);
  if (markers.targetY !== undefined) extra.push([0, markers.targetY]);
  const box = trajectoryBounds(payload.trajectories, extra);

  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#fafafa";
  ctx.fillRect(0, 0, width, height);

  if (markers.targetY !== undefined) {
    const [[, y]] = projectPolyline([[box.minX, markers.targetY]], box, width, height);
    ctx.strokeStyle = "#dc2626";
    ctx.setLineDash([5, 4]);
    ctx.beginPath();
    ctx.moveTo(0, y);
    ctx.lineTo(width, y);
    ctx.stroke();
    ctx.setLineDash([]);
  }

  payload.trajectories.forEach((traj, episode) => {
    const pts = projectPolyline(traj, box, width, height);
    ctx.strokeStyle = EPISODE_COLORS[episode % EPISODE_COLORS.length];
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    pts.forEach(([x, y], i) => (i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y)));
    ctx.stroke();
    // start marker
    const [sx, sy] = pts[0];
    ctx.fillStyle = "#111827";
    ctx.beginPath();
    ctx.arc(sx, sy, 3, 0, 2 * Math.PI);
    ctx.fill();
  });

  if (markers.goal) {
    const [[gx, gy]] = projectPolyline([markers.goal], box, width, height);
    ctx.strokeStyle = "#dc2626";
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.arc(gx, gy, 6, 0, 2 * Math.PI);
    ctx.stroke();
  }
  if (markers.direction) {
    const cx = width / 2, cy = height / 2, len = Math.min(width, height) * 0.25;
    const [ux, uy] = markers.direction;
    ctx.strokeStyle = "#dc2626";
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.moveTo(cx, cy);
    ctx.lineTo(cx + ux * len, cy - uy * len);
    ctx.stroke();
  }
}
