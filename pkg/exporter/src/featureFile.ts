/**
 * Writer for the engine's binary feature file format.
 *
 * Layout (little-endian):
 *   bytes 0-5   magic "GRDFV1" (video) or "GRDFQ1" (query)
 *   bytes 6-7   reserved, zero
 *   bytes 8-11  uint32 record count
 *   bytes 12-15 uint32 dimension
 *   records     video: uint64 video_id, dim * float32
 *               query: uint64 query_id, uint64 target_video_id,
 *                      uint32 text byte length, UTF-8 text, dim * float32
 */

export interface VideoRecord {
  id: bigint;
  features: Float32Array;
}

export interface QueryRecord {
  id: bigint;
  targetVideoId: bigint;
  text: string;
  features: Float32Array;
}

const HEADER_SIZE = 16;

function writeHeader(magic: string, count: number, dimension: number): Buffer {
  const header = Buffer.alloc(HEADER_SIZE);
  header.write(magic, 0, "latin1");
  header.writeUInt32LE(count, 8);
  header.writeUInt32LE(dimension, 12);
  return header;
}

function featureBytes(features: Float32Array, dimension: number): Buffer {
  if (features.length !== dimension) {
    throw new Error(`vector has ${features.length} components, expected ${dimension}`);
  }
  const buf = Buffer.alloc(dimension * 4);
  const view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  for (let i = 0; i < dimension; i++) {
    view.setFloat32(i * 4, features[i], true);
  }
  return buf;
}

export function encodeVideoStore(records: VideoRecord[], dimension: number): Buffer {
  const parts = [writeHeader("GRDFV1", records.length, dimension)];
  for (const record of records) {
    const head = Buffer.alloc(8);
    head.writeBigUInt64LE(record.id, 0);
    parts.push(head, featureBytes(record.features, dimension));
  }
  return Buffer.concat(parts);
}

export function encodeQueryStore(records: QueryRecord[], dimension: number): Buffer {
  const parts = [writeHeader("GRDFQ1", records.length, dimension)];
  for (const record of records) {
    const text = Buffer.from(record.text, "utf-8");
    const head = Buffer.alloc(20);
    head.writeBigUInt64LE(record.id, 0);
    head.writeBigUInt64LE(record.targetVideoId, 8);
    head.writeUInt32LE(text.length, 16);
    parts.push(head, text, featureBytes(record.features, dimension));
  }
  return Buffer.concat(parts);
}
