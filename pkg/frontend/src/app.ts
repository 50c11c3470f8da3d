/** DOM wiring: case browser, slice viewer with probability overlay, and the
 * debounced what-if scenario panel. Every displayed volume comes verbatim
 * from the prediction service. */

import { ApiClient, CaseInfo, CaseMetadata, Prediction, SliceRaster } from "./api.js";
import { DEBOUNCE_MS, Debounced, debounce } from "./debounce.js";
import {
  clampSliceIndex,
  decodeBase64,
  formatMl,
  grayscaleRgba,
  probabilityOverlayRgba,
} from "./overlay.js";
import { MTICI_GRADES, ScenarioState, decodeState, encodeState } from "./state.js";

const TEMPLATE = `
<div class="layout">
  <aside class="sidebar">
    <h1>Infarct explorer</h1>
    <ul id="case-list"></ul>
  </aside>
  <main class="main">
    <div id="banner" class="banner" hidden></div>
    <div id="empty" class="empty" hidden>No cases in the cohort — generate and preprocess one, then restart the service.</div>
    <section id="case-view" hidden>
      <div id="meta-chip" class="chip"></div>
      <div class="viewer">
        <canvas id="bg"></canvas>
        <canvas id="overlay"></canvas>
      </div>
      <div class="view-controls">
        <label>slice <input id="z" type="range" min="0" max="0" step="1"></label>
        <label>overlay <input id="opacity" type="range" min="0" max="1" step="0.05"></label>
        <label>background <select id="channel">
          <option>mean</option><option>cbf</option><option>cbv</option>
          <option>tmax</option><option>gt</option><option>mask</option>
        </select></label>
      </div>
      <fieldset class="scenario">
        <legend>Treatment scenario</legend>
        <label>onset → CTP (min) <input id="onset" type="range" min="0" max="1440" step="5"></label>
        <label>CTP → recanalization (min) <input id="recan" type="range" min="0" max="1440" step="5"></label>
        <label>mTICI <select id="mtici">${MTICI_GRADES.map((g) => `<option>${g}</option>`).join("")}</select></label>
        <label><input id="occluded" type="checkbox"> still occluded at 24 h</label>
        <label>threshold <input id="threshold" type="range" min="0.05" max="0.95" step="0.05"></label>
      </fieldset>
      <div id="volumes" class="volumes">
        <div>scenario <output id="vol-predicted"></output></div>
        <div>core (mTICI 3 @ 60 min) <output id="vol-core"></output></div>
        <div>perfusion lesion (no recan.) <output id="vol-lesion"></output></div>
        <div>penumbra (lesion − core) <output id="vol-penumbra"></output></div>
        <div>true lesion <output id="vol-true"></output></div>
      </div>
    </section>
  </main>
</div>`;

function metaFromState(s: ScenarioState): CaseMetadata {
  return {
    onset_to_ctp_min: s.onsetToCtpMin,
    ctp_to_recan_min: s.ctpToRecanMin,
    mtici: s.mtici,
    occluded_at_24h: s.occludedAt24h,
  };
}

export class App {
  state: ScenarioState;
  cases: CaseInfo[] = [];
  private lastPrediction: Prediction | null = null;
  private schedulePredict: Debounced<[]>;
  private inflight = new Set<Promise<unknown>>();
  private el: Record<string, HTMLElement> = {};

  constructor(
    root: HTMLElement,
    private api: ApiClient,
    private win: Window = window,
  ) {
    this.state = decodeState(win.location.hash);
    this.schedulePredict = debounce(() => this.runPredict(), DEBOUNCE_MS);
    root.innerHTML = TEMPLATE;
    for (const id of [
      "case-list", "banner", "empty", "case-view", "meta-chip", "bg", "overlay",
      "z", "opacity", "channel", "onset", "recan", "mtici", "occluded",
      "threshold", "volumes", "vol-predicted", "vol-core", "vol-lesion",
      "vol-penumbra", "vol-true",
    ]) {
      this.el[id] = root.querySelector(`#${id}`) as HTMLElement;
    }
    this.bindControls();
  }

  private track<T>(p: Promise<T>): Promise<T> {
    this.inflight.add(p);
    const done = () => this.inflight.delete(p);
    p.then(done, done);
    return p;
  }

  /** Resolves once all in-flight work (including chained requests) settles. */
  async idle(): Promise<void> {
    while (this.inflight.size > 0) {
      await Promise.allSettled([...this.inflight]);
    }
  }

  private input(id: string): HTMLInputElement {
    return this.el[id] as HTMLInputElement;
  }

  private bindControls() {
    const onScenarioChange = () => {
      this.state.onsetToCtpMin = Number(this.input("onset").value);
      this.state.ctpToRecanMin = Number(this.input("recan").value);
      this.state.mtici = (this.el["mtici"] as HTMLSelectElement).value as ScenarioState["mtici"];
      this.state.occludedAt24h = this.input("occluded").checked;
      this.state.threshold = Number(this.input("threshold").value);
      this.syncUrl();
      this.markStale();
      this.schedulePredict();
    };
    for (const id of ["onset", "recan", "threshold"]) {
      this.el[id].addEventListener("input", onScenarioChange);
    }
    this.el["mtici"].addEventListener("change", onScenarioChange);
    this.el["occluded"].addEventListener("change", onScenarioChange);

    this.el["z"].addEventListener("input", () => {
      this.state.z = Number(this.input("z").value);
      this.syncUrl();
      void this.track(this.redrawSlice());
    });
    this.el["opacity"].addEventListener("input", () => {
      this.state.opacity = Number(this.input("opacity").value);
      this.syncUrl();
      this.applyOpacity();
    });
    this.el["channel"].addEventListener("change", () => {
      this.state.channel = (this.el["channel"] as HTMLSelectElement).value;
      this.syncUrl();
      void this.track(this.redrawSlice());
    });
  }

  async start(): Promise<void> {
    try {
      this.cases = await this.track(this.api.listCases());
    } catch (err) {
      this.showError(err);
      return;
    }
    if (this.cases.length === 0) {
      this.el["empty"].hidden = false;
      return;
    }
    this.renderCaseList();
    const fromUrl = this.cases.find((c) => c.case_id === this.state.caseId);
    await this.selectCase(fromUrl ?? this.cases[0], fromUrl === undefined);
  }

  private renderCaseList() {
    const ul = this.el["case-list"];
    ul.innerHTML = "";
    for (const c of this.cases) {
      const li = this.win.document.createElement("li");
      const btn = this.win.document.createElement("button");
      btn.textContent = `${c.case_id} (${formatMl(c.true_lesion_ml)})`;
      btn.dataset.caseId = c.case_id;
      btn.addEventListener("click", () => void this.selectCase(c, true));
      li.appendChild(btn);
      ul.appendChild(li);
    }
  }

  /** Loads a case; fresh selections start at its middle slice and its
   * actual treatment metadata. */
  async selectCase(c: CaseInfo, reset: boolean): Promise<void> {
    this.state.caseId = c.case_id;
    const depth = c.shape[2];
    if (reset) {
      const m = c.metadata;
      this.state.z = Math.floor(depth / 2);
      this.state.onsetToCtpMin = m.onset_to_ctp_min;
      this.state.ctpToRecanMin = m.ctp_to_recan_min;
      this.state.mtici = m.mtici;
      this.state.occludedAt24h = m.occluded_at_24h;
    }
    this.state.z = clampSliceIndex(this.state.z, depth);
    this.el["case-view"].hidden = false;
    this.renderChip(c);
    this.pushStateToControls(depth);
    this.syncUrl();
    this.el["vol-true"].textContent = formatMl(c.true_lesion_ml);
    this.lastPrediction = null;
    this.markStale();

    await this.track(this.redrawSlice());
    await this.track(this.loadReferences(c));
    await this.track(this.runPredict());
  }

  private renderChip(c: CaseInfo) {
    const m = c.metadata;
    this.el["meta-chip"].textContent =
      `actual: mTICI ${m.mtici} · onset→CTP ${m.onset_to_ctp_min} min · ` +
      `CTP→recan ${m.ctp_to_recan_min} min · occluded at 24 h: ${m.occluded_at_24h ? "yes" : "no"}`;
  }

  private pushStateToControls(depth: number) {
    this.input("z").max = String(Math.max(0, depth - 1));
    this.input("z").value = String(this.state.z);
    this.input("opacity").value = String(this.state.opacity);
    (this.el["channel"] as HTMLSelectElement).value = this.state.channel;
    this.input("onset").value = String(this.state.onsetToCtpMin);
    this.input("recan").value = String(this.state.ctpToRecanMin);
    (this.el["mtici"] as HTMLSelectElement).value = this.state.mtici;
    this.input("occluded").checked = this.state.occludedAt24h;
    this.input("threshold").value = String(this.state.threshold);
  }

  private syncUrl() {
    const hash = `#${encodeState(this.state)}`;
    try {
      this.win.history.replaceState(null, "", hash);
    } catch {
      /* environments without history */
    }
    if (this.win.location.hash !== hash) {
      this.win.location.hash = hash;
    }
  }

  private currentCase(): CaseInfo | undefined {
    return this.cases.find((c) => c.case_id === this.state.caseId);
  }

  private async loadReferences(c: CaseInfo): Promise<void> {
    try {
      const refs = await this.api.referenceVolumes(c.case_id, c.metadata);
      this.el["vol-core"].textContent = formatMl(refs.coreMl);
      this.el["vol-lesion"].textContent = formatMl(refs.lesionMl);
      this.el["vol-penumbra"].textContent = formatMl(
        Math.max(refs.lesionMl - refs.coreMl, 0),
      );
    } catch (err) {
      this.showError(err);
    }
  }

  private async runPredict(): Promise<void> {
    const c = this.currentCase();
    if (c === undefined) return;
    let pred: Prediction | null;
    try {
      pred = await this.track(
        this.api.predict(c.case_id, metaFromState(this.state), this.state.threshold),
      );
    } catch (err) {
      this.showError(err);
      return;
    }
    if (pred === null) return; // superseded by a newer request
    this.lastPrediction = pred;
    this.el["vol-predicted"].textContent = formatMl(pred.predicted_ml);
    this.clearError();
    this.el["volumes"].classList.remove("stale");
    this.drawOverlay();
  }

  private markStale() {
    this.el["volumes"].classList.add("stale");
  }

  private showError(err: unknown) {
    const banner = this.el["banner"];
    banner.hidden = false;
    banner.textContent = `request failed: ${err instanceof Error ? err.message : String(err)}`;
    this.markStale();
  }

  private clearError() {
    this.el["banner"].hidden = true;
  }

  private async redrawSlice(): Promise<void> {
    const c = this.currentCase();
    if (c === undefined) return;
    let slice: SliceRaster;
    try {
      slice = await this.api.getSlice(c.case_id, this.state.z, this.state.channel);
    } catch (err) {
      this.showError(err);
      return;
    }
    this.paint(
      this.el["bg"] as HTMLCanvasElement,
      grayscaleRgba(decodeBase64(slice.data_b64)),
      slice.width,
      slice.height,
    );
    this.clearError();
    this.drawOverlay();
  }

  private drawOverlay() {
    const pred = this.lastPrediction;
    if (pred === null) return;
    const z = clampSliceIndex(this.state.z, pred.prob_slices_b64.length);
    this.paint(
      this.el["overlay"] as HTMLCanvasElement,
      probabilityOverlayRgba(decodeBase64(pred.prob_slices_b64[z])),
      pred.width,
      pred.height,
    );
    this.applyOpacity();
  }

  private applyOpacity() {
    const overlay = this.el["overlay"] as HTMLCanvasElement;
    overlay.style.opacity = String(this.state.opacity);
    overlay.hidden = this.state.opacity === 0;
  }

  private paint(
    canvas: HTMLCanvasElement,
    rgba: Uint8ClampedArray<ArrayBuffer>,
    width: number,
    height: number,
  ) {
    canvas.width = width;
    canvas.height = height;
    // DOM test environments ship no 2D raster backend
    if (typeof canvas.getContext !== "function" || typeof ImageData === "undefined") return;
    const ctx = canvas.getContext("2d");
    if (ctx === null) return;
    ctx.putImageData(new ImageData(rgba, width, height), 0, 0);
  }
}

export async function createApp(
  root: HTMLElement,
  api: ApiClient,
  win: Window = window,
): Promise<App> {
  const app = new App(root, api, win);
  await app.start();
  await app.idle();
  return app;
}
