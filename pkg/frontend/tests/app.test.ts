// @vitest-environment happy-dom
import { afterEach, describe, expect, it, vi } from "vitest";

import { ApiClient, CaseInfo } from "../src/api.js";
import { App, createApp } from "../src/app.js";
import { DEBOUNCE_MS } from "../src/debounce.js";
import { decodeState } from "../src/state.js";

function jsonResponse(doc: unknown, status = 200): Response {
  return {
    ok: status >= 200 && status < 300,
    status,
    statusText: `HTTP ${status}`,
    json: async () => doc,
  } as unknown as Response;
}

const CASES: CaseInfo[] = [
  {
    case_id: "c0",
    shape: [2, 2, 8],
    spacing_mm: [1.5, 1.5, 4],
    n_frames: 30,
    metadata: { onset_to_ctp_min: 134, ctp_to_recan_min: 101, mtici: "2b", occluded_at_24h: false },
    true_lesion_ml: 12.345,
  },
  {
    case_id: "c1",
    shape: [2, 2, 8],
    spacing_mm: [1.5, 1.5, 4],
    n_frames: 30,
    metadata: { onset_to_ctp_min: 60, ctp_to_recan_min: 200, mtici: "1", occluded_at_24h: true },
    true_lesion_ml: 3.05,
  },
];

interface FakeService {
  fetchFn: (url: string, init?: RequestInit) => Promise<Response>;
  sliceUrls: string[];
  predictBodies: Array<{ case_id: string; metadata: Record<string, unknown>; threshold: number }>;
  failPredicts: boolean;
}

function makeService(cases: CaseInfo[] = CASES): FakeService {
  const svc: FakeService = {
    sliceUrls: [],
    predictBodies: [],
    failPredicts: false,
    fetchFn: async (url, init) => {
      if (url === "/api/cases") return jsonResponse({ cases });
      const slice = url.match(/^\/api\/cases\/([^/]+)\/slice\/(\d+)\?channel=(.+)$/);
      if (slice !== null) {
        svc.sliceUrls.push(url);
        return jsonResponse({
          case_id: decodeURIComponent(slice[1]),
          z: Number(slice[2]),
          channel: slice[3],
          width: 2,
          height: 2,
          window: [0, 80],
          data_b64: btoa("\x00\x7f\x80\xff"),
        });
      }
      if (url === "/api/predict") {
        if (svc.failPredicts) return jsonResponse({ detail: "no model loaded" }, 503);
        const body = JSON.parse(String(init?.body));
        svc.predictBodies.push(body);
        const m = body.metadata;
        const ml = m.mtici === "3" ? 10.04 : m.mtici === "0" ? 30.06 : 18.26;
        return jsonResponse({
          case_id: body.case_id,
          threshold: body.threshold,
          predicted_ml: ml,
          expected_ml: ml + 1,
          shape: [2, 2, 8],
          width: 2,
          height: 2,
          prob_slices_b64: Array(8).fill(btoa("\x10\x20\x30\x40")),
        });
      }
      throw new Error(`unexpected request ${url}`);
    },
  };
  return svc;
}

async function boot(svc: FakeService): Promise<App> {
  window.location.hash = window.location.hash || "";
  const root = document.createElement("div");
  document.body.appendChild(root);
  return createApp(root, new ApiClient("", svc.fetchFn), window);
}

function slide(id: string, value: string) {
  const input = document.querySelector(`#${id}`) as HTMLInputElement;
  input.value = value;
  input.dispatchEvent(new Event("input"));
}

function text(id: string): string {
  return (document.querySelector(`#${id}`) as HTMLElement).textContent ?? "";
}

afterEach(() => {
  document.body.innerHTML = "";
  window.location.hash = "";
  vi.useRealTimers();
});

describe("startup", () => {
  it("shows an empty-state message for an empty cohort", async () => {
    await boot(makeService([]));
    const empty = document.querySelector("#empty") as HTMLElement;
    expect(empty.hidden).toBe(false);
    expect(empty.textContent).toContain("No cases");
    expect((document.querySelector("#case-view") as HTMLElement).hidden).toBe(true);
  });

  it("loads the first case at its middle slice", async () => {
    const svc = makeService();
    const app = await boot(svc);
    expect(app.state.caseId).toBe("c0");
    expect(app.state.z).toBe(4);
    expect(svc.sliceUrls[0]).toBe("/api/cases/c0/slice/4?channel=mean");
  });

  it("shows the case's actual metadata in the chip", async () => {
    await boot(makeService());
    const chip = text("meta-chip");
    expect(chip).toContain("mTICI 2b");
    expect(chip).toContain("onset→CTP 134 min");
    expect(chip).toContain("CTP→recan 101 min");
    expect(chip).toContain("occluded at 24 h: no");
  });

  it("clamps a slice index from the URL to the case depth", async () => {
    window.location.hash = "#case=c0&z=99";
    const svc = makeService();
    const app = await boot(svc);
    expect(app.state.z).toBe(7);
    expect(svc.sliceUrls[0]).toContain("/slice/7?");
  });
});

describe("volumes", () => {
  it("displays service volumes rounded to 0.1 ml", async () => {
    await boot(makeService());
    expect(text("vol-predicted")).toBe("18.3 ml");
    expect(text("vol-core")).toBe("10.0 ml");
    expect(text("vol-lesion")).toBe("30.1 ml");
    expect(text("vol-penumbra")).toBe("20.0 ml"); // 30.06 − 10.04
    expect(text("vol-true")).toBe("12.3 ml");
  });

  it("fetches the reference volumes once per case", async () => {
    const svc = makeService();
    await boot(svc);
    const refs = svc.predictBodies.filter(
      (b) => b.metadata.mtici === "3" || b.metadata.mtici === "0",
    );
    expect(refs).toHaveLength(2);
  });
});

describe("scenario panel", () => {
  it("issues exactly one request after a burst of slider moves", async () => {
    const svc = makeService();
    const app = await boot(svc);
    const before = svc.predictBodies.length;

    vi.useFakeTimers();
    for (const v of ["120", "150", "180", "210", "240"]) {
      slide("recan", v);
      await vi.advanceTimersByTimeAsync(100);
    }
    await vi.advanceTimersByTimeAsync(DEBOUNCE_MS);
    await app.idle();

    const burst = svc.predictBodies.slice(before);
    expect(burst).toHaveLength(1);
    expect(burst[0].metadata.ctp_to_recan_min).toBe(240);
  });

  it("greys the volumes while a change is pending", async () => {
    const svc = makeService();
    const app = await boot(svc);
    const volumes = document.querySelector("#volumes") as HTMLElement;
    expect(volumes.classList.contains("stale")).toBe(false);

    vi.useFakeTimers();
    slide("recan", "500");
    expect(volumes.classList.contains("stale")).toBe(true);
    await vi.advanceTimersByTimeAsync(DEBOUNCE_MS);
    await app.idle();
    expect(volumes.classList.contains("stale")).toBe(false);
  });

  it("shows a banner and keeps volumes greyed when the request fails", async () => {
    const svc = makeService();
    const app = await boot(svc);
    svc.failPredicts = true;

    vi.useFakeTimers();
    slide("recan", "400");
    await vi.advanceTimersByTimeAsync(DEBOUNCE_MS);
    await app.idle();

    const banner = document.querySelector("#banner") as HTMLElement;
    expect(banner.hidden).toBe(false);
    expect(banner.textContent).toContain("no model loaded");
    expect(
      (document.querySelector("#volumes") as HTMLElement).classList.contains("stale"),
    ).toBe(true);
  });
});

describe("viewer controls", () => {
  it("changing slice fetches the new plane without predicting again", async () => {
    const svc = makeService();
    const app = await boot(svc);
    const predictsBefore = svc.predictBodies.length;
    slide("z", "6");
    await app.idle();
    expect(app.state.z).toBe(6);
    expect(svc.sliceUrls.at(-1)).toBe("/api/cases/c0/slice/6?channel=mean");
    expect(svc.predictBodies.length).toBe(predictsBefore);
  });

  it("opacity zero hides the overlay", async () => {
    await boot(makeService());
    const overlay = document.querySelector("#overlay") as HTMLCanvasElement;
    expect(overlay.hidden).toBe(false);
    slide("opacity", "0");
    expect(overlay.hidden).toBe(true);
    expect(overlay.style.opacity).toBe("0");
    slide("opacity", "0.4");
    expect(overlay.hidden).toBe(false);
  });
});

describe("case switching and URL state", () => {
  it("selecting another case loads its middle slice and metadata", async () => {
    const svc = makeService();
    const app = await boot(svc);
    const btn = document.querySelector('button[data-case-id="c1"]') as HTMLButtonElement;
    btn.click();
    await app.idle();
    expect(app.state.caseId).toBe("c1");
    expect(app.state.z).toBe(4);
    expect(text("meta-chip")).toContain("mTICI 1");
    expect(app.state.ctpToRecanMin).toBe(200);
  });

  it("round-trips the scenario state through the URL", async () => {
    const svc = makeService();
    const app = await boot(svc);
    vi.useFakeTimers();
    slide("recan", "425");
    slide("threshold", "0.35");
    await vi.advanceTimersByTimeAsync(DEBOUNCE_MS);
    await app.idle();
    expect(decodeState(window.location.hash)).toEqual(app.state);
  });
});
