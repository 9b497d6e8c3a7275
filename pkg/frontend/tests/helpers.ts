/** Re-exports so test files import runtime code from one place. */

export {
  distance,
  finalPoint,
  pathLength,
  projectPolyline,
  taskMarkers,
  trajectoryBounds,
} from "../src/render.js";
export { sparklinePath as sparkline } from "../src/sparkline.js";
export { ApiClient } from "../src/api.js";
export type { CandidatePayload, SessionView, TraceView } from "../src/api.js";
export { RankingBoard } from "../src/ranking.js";
export { App } from "../src/app.js";
