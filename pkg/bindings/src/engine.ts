// Process-level access to the engine CLI. The command defaults to `tid`
// on PATH and can be overridden with the TID_CLI environment variable
// (split on whitespace, e.g. "python3 -m tid").

import { spawnSync } from "node:child_process";

export class EngineError extends Error {}

export function engineCommand(): string[] {
  const override = process.env.TID_CLI;
  if (override && override.trim().length > 0) {
    return override.trim().split(/\s+/);
  }
  return ["tid"];
}

export function runEngine(args: string[]): string {
  const [cmd, ...base] = engineCommand();
  const result = spawnSync(cmd, [...base, ...args], { encoding: "utf-8" });
  if (result.error) {
    throw new EngineError(`failed to launch ${cmd}: ${result.error.message}`);
  }
  if (result.status !== 0) {
    const detail = (result.stderr ?? "").trim();
    throw new EngineError(detail || `engine exited with status ${result.status}`);
  }
  return result.stdout ?? "";
}

/** Version string reported by the engine itself ("tid X.Y.Z" -> "X.Y.Z"). */
export function engineVersion(): string {
  const words = runEngine(["--version"]).trim().split(/\s+/);
  return words[words.length - 1];
}
