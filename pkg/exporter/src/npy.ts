/**
 * Minimal NumPy .npy reader for embedding matrices.
 *
 * Supports version 1.0/2.0 files holding little-endian float32 ('<f4')
 * or float64 ('<f8') data in C order, 1-D or 2-D. That covers what
 * `numpy.save` produces for embedding exports; anything else is
 * rejected loudly rather than misread.
 */

const NPY_MAGIC = Buffer.from("\x93NUMPY", "latin1");

export interface NpyArray {
  /** [rows, cols] — 1-D inputs become [1, n] */
  shape: [number, number];
  dtype: "<f4" | "<f8";
  /** row-major values, one Float64Array per row worth of access */
  data: Float64Array;
}

export class NpyFormatError extends Error {}

function parseHeaderDict(header: string): { descr: string; fortran: boolean; shape: number[] } {
  const descr = /'descr'\s*:\s*'([^']+)'/.exec(header);
  const fortran = /'fortran_order'\s*:\s*(True|False)/.exec(header);
  const shape = /'shape'\s*:\s*\(([^)]*)\)/.exec(header);
  if (!descr || !fortran || !shape) {
    throw new NpyFormatError(`unparseable .npy header: ${header.trim()}`);
  }
  const dims = shape[1]
    .split(",")
    .map((s) => s.trim())
    .filter((s) => s.length > 0)
    .map((s) => {
      const n = Number(s);
      if (!Number.isInteger(n) || n < 0) {
        throw new NpyFormatError(`bad shape entry '${s}'`);
      }
      return n;
    });
  return { descr: descr[1], fortran: fortran[1] === "True", shape: dims };
}

export function parseNpy(buf: Buffer): NpyArray {
  if (buf.length < 10 || !buf.subarray(0, 6).equals(NPY_MAGIC)) {
    throw new NpyFormatError("not a .npy file (bad magic)");
  }
  const major = buf[6];
  let headerLen: number;
  let headerStart: number;
  if (major === 1) {
    headerLen = buf.readUInt16LE(8);
    headerStart = 10;
  } else if (major === 2 || major === 3) {
    headerLen = buf.readUInt32LE(8);
    headerStart = 12;
  } else {
    throw new NpyFormatError(`unsupported .npy version ${major}`);
  }
  const header = buf.subarray(headerStart, headerStart + headerLen).toString("latin1");
  const { descr, fortran, shape } = parseHeaderDict(header);
  if (descr !== "<f4" && descr !== "<f8") {
    throw new NpyFormatError(`unsupported dtype ${descr} (need <f4 or <f8)`);
  }
  if (fortran) {
    throw new NpyFormatError("fortran-ordered arrays are not supported");
  }
  if (shape.length < 1 || shape.length > 2) {
    throw new NpyFormatError(`need a 1-D or 2-D array, got shape (${shape.join(", ")})`);
  }
  const [rows, cols] = shape.length === 1 ? [1, shape[0]] : [shape[0], shape[1]];
  const itemSize = descr === "<f4" ? 4 : 8;
  const body = buf.subarray(headerStart + headerLen);
  const expected = rows * cols * itemSize;
  if (body.length !== expected) {
    throw new NpyFormatError(
      `payload is ${body.length} bytes, expected ${expected} for shape (${rows}, ${cols})`,
    );
  }
  const data = new Float64Array(rows * cols);
  const view = new DataView(body.buffer, body.byteOffset, body.byteLength);
  for (let i = 0; i < rows * cols; i++) {
    data[i] = descr === "<f4" ? view.getFloat32(i * 4, true) : view.getFloat64(i * 8, true);
  }
  return { shape: [rows, cols], dtype: descr, data };
}
