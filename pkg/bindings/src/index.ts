// Array-level bindings to the tid engine.
//
// The engine owns all numerics; these bindings marshal in-memory arrays
// through its documented interfaces (tensor files, bundle/ground-truth
// JSON, flat config JSON) and invoke the CLI, so results are
// bit-identical to direct CLI use on the same inputs. Engine-side
// validation failures surface as exceptions carrying the engine's own
// message.

import { mkdtempSync, rmSync, writeFileSync, mkdirSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { runEngine } from "./engine.js";
import {
  ArrayView,
  TensorFormatError,
  readTensorFile,
  toArrayView,
  writeTensorFile,
} from "./tidt.js";

export const VERSION = "0.1.0";

export type { ArrayView };
export { TensorFormatError, toArrayView };
export { EngineError, engineVersion } from "./engine.js";

/** One model's per-level outputs, mirroring the engine's bundle layout. */
export interface DetectorOutputs {
  levelId: number;
  feature: ArrayView; // C x H x W
  classScores: ArrayView; // H x W x K, values in [0, 1]
  predBoxes: ArrayView; // H x W x 4, corner form (x1, y1, x2, y2)
}

export interface GroundTruthEntry {
  box: [number, number, number, number];
  label: number;
}

/** Flat config keys, mirroring the CLI's --config vocabulary. */
export type ConfigMap = Record<string, number>;

function writeBundle(dir: string, name: string, outputs: DetectorOutputs): string {
  const feature = toArrayView(outputs.feature.dims, outputs.feature.data);
  const classScores = toArrayView(outputs.classScores.dims, outputs.classScores.data);
  const predBoxes = toArrayView(outputs.predBoxes.dims, outputs.predBoxes.data);
  writeTensorFile(join(dir, `${name}_feature.tidt`), feature);
  writeTensorFile(join(dir, `${name}_class_scores.tidt`), classScores);
  writeTensorFile(join(dir, `${name}_pred_boxes.tidt`), predBoxes);
  const metaPath = join(dir, `${name}_bundle.json`);
  writeFileSync(
    metaPath,
    JSON.stringify({
      level_id: outputs.levelId,
      feature: `${name}_feature.tidt`,
      class_scores: `${name}_class_scores.tidt`,
      pred_boxes: `${name}_pred_boxes.tidt`,
    }),
  );
  return metaPath;
}

function withWorkDir<T>(fn: (dir: string) => T): T {
  const dir = mkdtempSync(join(tmpdir(), "tid-bindings-"));
  try {
    return fn(dir);
  } finally {
    rmSync(dir, { recursive: true, force: true });
  }
}

/**
 * Combined value map and tiered mask for one teacher/student output pair.
 *
 * Numerically identical (bitwise) to `tid mask` on the same inputs.
 */
export function tidValueMap(
  teacher: DetectorOutputs,
  student: DetectorOutputs,
  groundTruth: GroundTruthEntry[],
  config: ConfigMap = {},
): { v: ArrayView; mask: ArrayView } {
  return withWorkDir((dir) => {
    const teacherMeta = writeBundle(dir, "teacher", teacher);
    const studentMeta = writeBundle(dir, "student", student);
    const gtPath = join(dir, "gt.json");
    writeFileSync(
      gtPath,
      JSON.stringify(groundTruth.map((e) => ({ box: e.box, label: e.label }))),
    );
    const configPath = join(dir, "config.json");
    writeFileSync(configPath, JSON.stringify(config));
    const outDir = join(dir, "out");
    mkdirSync(outDir);
    runEngine([
      "mask",
      "--config", configPath,
      "--teacher", teacherMeta,
      "--student", studentMeta,
      "--gt", gtPath,
      "--out", outDir,
    ]);
    return {
      v: readTensorFile(join(outDir, "v.tidt")),
      mask: readTensorFile(join(outDir, "mask.tidt")),
    };
  });
}

/**
 * Masked feature-imitation loss and its gradient wrt the student feature.
 *
 * Equals the engine's loss evaluation bitwise; the gradient array has the
 * student feature's shape.
 */
export function tidLossAndGrad(
  teacherFeature: ArrayView,
  studentFeature: ArrayView,
  mask: ArrayView,
): { total: number; grad: ArrayView } {
  return withWorkDir((dir) => {
    writeTensorFile(join(dir, "teacher.tidt"), toArrayView(teacherFeature.dims, teacherFeature.data));
    writeTensorFile(join(dir, "student.tidt"), toArrayView(studentFeature.dims, studentFeature.data));
    writeTensorFile(join(dir, "mask.tidt"), toArrayView(mask.dims, mask.data));
    const outDir = join(dir, "out");
    mkdirSync(outDir);
    const stdout = runEngine([
      "loss",
      "--teacher", join(dir, "teacher.tidt"),
      "--student", join(dir, "student.tidt"),
      "--mask", join(dir, "mask.tidt"),
      "--emit-grad",
      "--out", outDir,
    ]);
    const payload = JSON.parse(stdout) as { total: number };
    return {
      total: payload.total,
      grad: readTensorFile(join(outDir, "grad.tidt")),
    };
  });
}
