/**
 * Export orchestration: manifest + .npy embeddings -> engine feature file.
 */

import * as fs from "node:fs";

import { encodeQueryStore, encodeVideoStore, QueryRecord, VideoRecord } from "./featureFile.js";
import { ExportManifest, loadManifest, ManifestError } from "./manifest.js";
import { parseNpy } from "./npy.js";

export interface ExportSummary {
  kind: "video" | "query";
  count: number;
  dimension: number;
  bytes: number;
}

export function buildStoreBytes(manifest: ExportManifest): Buffer {
  const npy = parseNpy(fs.readFileSync(manifest.embeddingsPath));
  const [rows, dimension] = npy.shape;
  if (dimension === 0) {
    throw new ManifestError("embeddings have dimension 0");
  }
  if (rows !== manifest.ids.length) {
    throw new ManifestError(
      `embeddings hold ${rows} rows but the manifest lists ${manifest.ids.length} ids`,
    );
  }
  const vectors: Float32Array[] = [];
  for (let r = 0; r < rows; r++) {
    const vec = new Float32Array(dimension);
    for (let c = 0; c < dimension; c++) {
      const value = npy.data[r * dimension + c];
      if (!Number.isFinite(value)) {
        throw new ManifestError(
          `non-finite value in row for id ${manifest.ids[r]} (column ${c})`,
        );
      }
      vec[c] = value;
    }
    vectors.push(vec);
  }
  if (manifest.kind === "video") {
    const records: VideoRecord[] = manifest.ids.map((id, r) => ({
      id,
      features: vectors[r],
    }));
    return encodeVideoStore(records, dimension);
  }
  const records: QueryRecord[] = manifest.ids.map((id, r) => ({
    id,
    targetVideoId: manifest.targetVideoIds![r],
    text: manifest.texts ? manifest.texts[r] : "",
    features: vectors[r],
  }));
  return encodeQueryStore(records, dimension);
}

export function exportFeatures(manifestPath: string, outPath: string): ExportSummary {
  const manifest = loadManifest(manifestPath);
  const bytes = buildStoreBytes(manifest);
  fs.writeFileSync(outPath, bytes);
  const dimension = bytes.readUInt32LE(12);
  return {
    kind: manifest.kind,
    count: manifest.ids.length,
    dimension,
    bytes: bytes.length,
  };
}
