/**
 * Export manifest: which embeddings become which records.
 *
 * {
 *   "kind": "video" | "query",
 *   "embeddings": "vectors.npy",          // path relative to the manifest
 *   "ids": [101, 102, ...],               // one per embedding row
 *   "target_video_ids": [...],            // query kind only
 *   "texts": ["...", ...]                 // query kind, optional
 * }
 *
 * The exporter deliberately knows nothing about models; embeddings
 * arrive as serialized arrays, so the backbone choice stays user-side.
 */

import * as fs from "node:fs";
import * as path from "node:path";

export interface ExportManifest {
  kind: "video" | "query";
  embeddingsPath: string;
  ids: bigint[];
  targetVideoIds?: bigint[];
  texts?: string[];
}

export class ManifestError extends Error {}

function toIdArray(value: unknown, field: string): bigint[] {
  if (!Array.isArray(value)) {
    throw new ManifestError(`${field} must be an array of non-negative integers`);
  }
  return value.map((v, i) => {
    if (typeof v === "number" && Number.isSafeInteger(v) && v >= 0) {
      return BigInt(v);
    }
    if (typeof v === "string" && /^\d+$/.test(v)) {
      return BigInt(v); // ids beyond 2^53 arrive as strings
    }
    throw new ManifestError(`${field}[${i}] is not a non-negative integer: ${JSON.stringify(v)}`);
  });
}

export function loadManifest(manifestPath: string): ExportManifest {
  let raw: unknown;
  try {
    raw = JSON.parse(fs.readFileSync(manifestPath, "utf-8"));
  } catch (err) {
    throw new ManifestError(`cannot read manifest ${manifestPath}: ${(err as Error).message}`);
  }
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    throw new ManifestError("manifest must be a JSON object");
  }
  const obj = raw as Record<string, unknown>;
  const known = new Set(["kind", "embeddings", "ids", "target_video_ids", "texts"]);
  for (const key of Object.keys(obj)) {
    if (!known.has(key)) {
      throw new ManifestError(`unknown manifest key: ${key}`);
    }
  }
  if (obj.kind !== "video" && obj.kind !== "query") {
    throw new ManifestError(`kind must be "video" or "query", got ${JSON.stringify(obj.kind)}`);
  }
  if (typeof obj.embeddings !== "string") {
    throw new ManifestError("embeddings must be a path to a .npy file");
  }
  const ids = toIdArray(obj.ids, "ids");
  if (new Set(ids.map(String)).size !== ids.length) {
    throw new ManifestError("ids must be unique");
  }
  const manifest: ExportManifest = {
    kind: obj.kind,
    embeddingsPath: path.resolve(path.dirname(manifestPath), obj.embeddings),
    ids,
  };
  if (obj.kind === "query") {
    if (obj.target_video_ids === undefined) {
      throw new ManifestError("query manifests require target_video_ids");
    }
    manifest.targetVideoIds = toIdArray(obj.target_video_ids, "target_video_ids");
    if (manifest.targetVideoIds.length !== ids.length) {
      throw new ManifestError("target_video_ids must match ids in length");
    }
    if (obj.texts !== undefined) {
      if (
        !Array.isArray(obj.texts) ||
        obj.texts.some((t) => typeof t !== "string") ||
        obj.texts.length !== ids.length
      ) {
        throw new ManifestError("texts must be an array of strings matching ids in length");
      }
      manifest.texts = obj.texts as string[];
    }
  } else if (obj.target_video_ids !== undefined || obj.texts !== undefined) {
    throw new ManifestError("video manifests take neither target_video_ids nor texts");
  }
  return manifest;
}
