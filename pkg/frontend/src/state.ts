/** What-if scenario state, shareable through the URL hash. */

export const MTICI_GRADES = ["0", "1", "2a", "2b", "3"] as const;
export type Mtici = (typeof MTICI_GRADES)[number];

export interface ScenarioState {
  caseId: string | null;
  onsetToCtpMin: number;
  ctpToRecanMin: number;
  mtici: Mtici;
  occludedAt24h: boolean;
  threshold: number;
  /** Displayed slice (clamped to the case depth at render time). */
  z: number;
  /** Overlay opacity in [0, 1]; 0 hides the overlay entirely. */
  opacity: number;
  channel: string;
}

export function defaultState(): ScenarioState {
  return {
    caseId: null,
    onsetToCtpMin: 120,
    ctpToRecanMin: 90,
    mtici: "3",
    occludedAt24h: false,
    threshold: 0.5,
    z: 0,
    opacity: 0.6,
    channel: "mean",
  };
}

export function encodeState(s: ScenarioState): string {
  const q = new URLSearchParams();
  if (s.caseId !== null) q.set("case", s.caseId);
  q.set("onset", String(s.onsetToCtpMin));
  q.set("recan", String(s.ctpToRecanMin));
  q.set("mtici", s.mtici);
  q.set("occluded", s.occludedAt24h ? "1" : "0");
  q.set("threshold", String(s.threshold));
  q.set("z", String(s.z));
  q.set("opacity", String(s.opacity));
  q.set("channel", s.channel);
  return q.toString();
}

function asNumber(v: string | null, fallback: number): number {
  if (v === null) return fallback;
  const n = Number(v);
  return Number.isFinite(n) ? n : fallback;
}

export function decodeState(hash: string): ScenarioState {
  const q = new URLSearchParams(hash.replace(/^#/, ""));
  const d = defaultState();
  const grade = q.get("mtici");
  return {
    caseId: q.get("case"),
    onsetToCtpMin: asNumber(q.get("onset"), d.onsetToCtpMin),
    ctpToRecanMin: asNumber(q.get("recan"), d.ctpToRecanMin),
    mtici: (MTICI_GRADES as readonly string[]).includes(grade ?? "")
      ? (grade as Mtici)
      : d.mtici,
    occludedAt24h: q.get("occluded") === "1",
    threshold: asNumber(q.get("threshold"), d.threshold),
    z: asNumber(q.get("z"), d.z),
    opacity: asNumber(q.get("opacity"), d.opacity),
    channel: q.get("channel") ?? d.channel,
  };
}
