// Reader/writer for the engine's flat binary tensor files ("TIDT" v1):
// magic "TIDT" | u32 LE version | u32 LE ndim | ndim * u32 LE dims |
// f32 LE row-major payload. Loaders reject non-finite payloads.

import { readFileSync, writeFileSync } from "node:fs";

export const FORMAT_VERSION = 1;
export const MAX_AXES = 4;
const HEADER_BASE = 12;

export class TensorFormatError extends Error {}

export interface ArrayView {
  dims: number[];
  data: Float32Array;
}

export function elementCount(dims: readonly number[]): number {
  return dims.reduce((a, b) => a * b, 1);
}

/**
 * Validate dims/data at the host boundary. Float32Array inputs are used
 * as-is (they are contiguous by construction); anything else is copied
 * into a fresh Float32Array, never reinterpreted.
 */
export function toArrayView(
  dims: readonly number[],
  data: Float32Array | ArrayLike<number>,
): ArrayView {
  if (dims.length < 1 || dims.length > MAX_AXES) {
    throw new TensorFormatError(`tensors carry 1..${MAX_AXES} axes, got ${dims.length}`);
  }
  for (const d of dims) {
    if (!Number.isInteger(d) || d < 1) {
      throw new TensorFormatError(`extents must be positive integers, got [${dims}]`);
    }
  }
  const expected = elementCount(dims);
  if (data.length !== expected) {
    throw new TensorFormatError(
      `dims [${dims}] need ${expected} values, buffer holds ${data.length}`,
    );
  }
  const values = data instanceof Float32Array ? data : Float32Array.from(data);
  return { dims: [...dims], data: values };
}

export function readTensorFile(path: string): ArrayView {
  const buf = readFileSync(path);
  if (buf.length < 4 || buf.toString("latin1", 0, 4) !== "TIDT") {
    throw new TensorFormatError(`${path}: not a TIDT tensor file`);
  }
  if (buf.length < HEADER_BASE) {
    throw new TensorFormatError(`${path}: header cut short`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== FORMAT_VERSION) {
    throw new TensorFormatError(`${path}: version ${version}, expected ${FORMAT_VERSION}`);
  }
  const ndim = buf.readUInt32LE(8);
  if (ndim < 1 || ndim > MAX_AXES) {
    throw new TensorFormatError(`${path}: axis count ${ndim} outside 1..${MAX_AXES}`);
  }
  if (buf.length < HEADER_BASE + 4 * ndim) {
    throw new TensorFormatError(`${path}: dims cut short`);
  }
  const dims: number[] = [];
  for (let i = 0; i < ndim; i++) {
    dims.push(buf.readUInt32LE(HEADER_BASE + 4 * i));
  }
  if (dims.some((d) => d < 1)) {
    throw new TensorFormatError(`${path}: extents must be positive, got [${dims}]`);
  }
  const count = elementCount(dims);
  const offset = HEADER_BASE + 4 * ndim;
  if (buf.length < offset + 4 * count) {
    throw new TensorFormatError(`${path}: declared ${count} values, payload is short`);
  }
  if (buf.length > offset + 4 * count) {
    throw new TensorFormatError(`${path}: trailing bytes after payload`);
  }
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    data[i] = buf.readFloatLE(offset + 4 * i);
    if (!Number.isFinite(data[i])) {
      throw new TensorFormatError(`${path}: non-finite element in payload`);
    }
  }
  return { dims, data };
}

export function writeTensorFile(path: string, view: ArrayView): void {
  const { dims, data } = toArrayView(view.dims, view.data);
  for (const x of data) {
    if (!Number.isFinite(x)) {
      throw new TensorFormatError(`${path}: refusing to write non-finite values`);
    }
  }
  const buf = Buffer.alloc(HEADER_BASE + 4 * dims.length + 4 * data.length);
  buf.write("TIDT", 0, "latin1");
  buf.writeUInt32LE(FORMAT_VERSION, 4);
  buf.writeUInt32LE(dims.length, 8);
  dims.forEach((d, i) => buf.writeUInt32LE(d, HEADER_BASE + 4 * i));
  const offset = HEADER_BASE + 4 * dims.length;
  data.forEach((x, i) => buf.writeFloatLE(x, offset + 4 * i));
  writeFileSync(path, buf);
}
