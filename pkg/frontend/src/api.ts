/** Typed client for the prediction service.
 *
 * All numbers shown in the UI originate here — the client never computes
 * volumes itself. Predictions use a sequence number so that a slow response
 * superseded by a newer request is dropped instead of flickering in.
 */

import type { Mtici } from "./state.js";

export interface CaseMetadata {
  onset_to_ctp_min: number;
  ctp_to_recan_min: number;
  mtici: Mtici;
  occluded_at_24h: boolean;
}

export interface CaseInfo {
  case_id: string;
  shape: [number, number, number];
  spacing_mm: [number, number, number];
  n_frames: number;
  metadata: CaseMetadata;
  true_lesion_ml: number;
}

export interface SliceRaster {
  case_id: string;
  z: number;
  channel: string;
  width: number;
  height: number;
  window: [number, number];
  data_b64: string;
}

export interface Prediction {
  case_id: string;
  threshold: number;
  predicted_ml: number;
  expected_ml: number;
  shape: [number, number, number];
  width: number;
  height: number;
  prob_slices_b64: string[];
}

export interface ReferenceVolumes {
  coreMl: number;
  lesionMl: number;
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    message: string,
    readonly status: number,
  ) {
    super(message);
  }
}

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(detail, resp.status);
  }
  return (await resp.json()) as T;
}

export class ApiClient {
  private seq = 0;
  private refCache = new Map<string, Promise<ReferenceVolumes>>();

  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (...a) => fetch(...a),
  ) {}

  async listCases(): Promise<CaseInfo[]> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/cases`);
    const doc = await asJson<{ cases: CaseInfo[] }>(resp);
    return doc.cases;
  }

  async getSlice(caseId: string, z: number, channel: string): Promise<SliceRaster> {
    const url = `${this.baseUrl}/api/cases/${encodeURIComponent(caseId)}/slice/${z}?channel=${encodeURIComponent(channel)}`;
    return asJson<SliceRaster>(await this.fetchFn(url));
  }

  private async postPredict(
    caseId: string,
    metadata: CaseMetadata,
    threshold: number,
  ): Promise<Prediction> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/predict`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ case_id: caseId, metadata, threshold }),
    });
    return asJson<Prediction>(resp);
  }

  /** Latest-wins prediction: returns null if a newer request started meanwhile. */
  async predict(
    caseId: string,
    metadata: CaseMetadata,
    threshold: number,
  ): Promise<Prediction | null> {
    const ticket = ++this.seq;
    const result = await this.postPredict(caseId, metadata, threshold);
    return ticket === this.seq ? result : null;
  }

  /** Core (mTICI 3 at 60 min) and perfusion-lesion (no recanalization)
   * volumes, fetched once per case and cached. */
  referenceVolumes(caseId: string, actual: CaseMetadata): Promise<ReferenceVolumes> {
    let cached = this.refCache.get(caseId);
    if (cached === undefined) {
      cached = this.fetchReferences(caseId, actual);
      this.refCache.set(caseId, cached);
      cached.catch(() => this.refCache.delete(caseId));
    }
    return cached;
  }

  private async fetchReferences(
    caseId: string,
    actual: CaseMetadata,
  ): Promise<ReferenceVolumes> {
    const core = await this.postPredict(
      caseId,
      { ...actual, mtici: "3", ctp_to_recan_min: 60, occluded_at_24h: false },
      0.5,
    );
    const lesion = await this.postPredict(
      caseId,
      { ...actual, mtici: "0", occluded_at_24h: true },
      0.5,
    );
    return { coreMl: core.predicted_ml, lesionMl: lesion.predicted_ml };
  }
}
