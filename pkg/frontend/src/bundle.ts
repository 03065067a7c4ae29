/** Read-only access to a study bundle directory (bundle.json + audio/).
 *
 * The bundle format is fixed by the experiment harness's export command;
 * this side only verifies and serves it. Every audio file is checked
 * against its manifest hash at load, and nothing here ever writes into
 * the bundle directory.
 */

import { createHash } from "node:crypto";
import { readFileSync } from "node:fs";
import { join, normalize } from "node:path";

export class BundleError extends Error {}

export interface BundleTrial {
  trial_id: string;
  sample_index: number;
  condition: string;
  wav: string;
  sha256: string;
  rel_context_wav: string | null;
}

export interface BundleManifest {
  version: number;
  n_samples: number;
  conditions: string[];
  permutation_algo: string;
  context_sha256: Record<string, string>;
  trials: BundleTrial[];
}

const REQUIRED_CONDITIONS = ["ground_truth", "pure_noise"];
const PERMUTATION_ALGO = "fnv1a64-splitmix64-fisher-yates";

export class StudyBundle {
  readonly dir: string;
  readonly manifest: BundleManifest;
  readonly trialById: Map<string, BundleTrial>;

  constructor(dir: string, manifest: BundleManifest) {
    this.dir = dir;
    this.manifest = manifest;
    this.trialById = new Map(manifest.trials.map((t) => [t.trial_id, t]));
  }

  get trials(): BundleTrial[] {
    return this.manifest.trials;
  }

  /** Absolute path of a manifest-relative audio file; rejects anything
   * that would escape the bundle directory. */
  audioPath(relPath: string): string {
    const full = normalize(join(this.dir, relPath));
    if (!full.startsWith(normalize(this.dir))) {
      throw new BundleError(`audio path ${relPath} escapes the bundle`);
    }
    return full;
  }

  readAudio(relPath: string): Buffer {
    return readFileSync(this.audioPath(relPath));
  }
}

function sha256File(path: string): string {
  return createHash("sha256").update(readFileSync(path)).digest("hex");
}

export function loadBundle(dir: string): StudyBundle {
  let raw: string;
  try {
    raw = readFileSync(join(dir, "bundle.json"), "utf-8");
  } catch {
    throw new BundleError(`no bundle manifest in ${dir}`);
  }
  const manifest = JSON.parse(raw) as BundleManifest;
  if (manifest.version !== 1) {
    throw new BundleError(`unsupported bundle version ${manifest.version}`);
  }
  if (manifest.permutation_algo !== PERMUTATION_ALGO) {
    throw new BundleError(`unknown permutation algorithm ${manifest.permutation_algo}`);
  }
  if (!Array.isArray(manifest.trials) || manifest.trials.length === 0) {
    throw new BundleError("bundle has no trials");
  }
  const conditions = new Set(manifest.trials.map((t) => t.condition));
  for (const required of REQUIRED_CONDITIONS) {
    if (!conditions.has(required)) {
      throw new BundleError(`bundle lacks the ${required} control condition`);
    }
  }
  const ids = new Set(manifest.trials.map((t) => t.trial_id));
  if (ids.size !== manifest.trials.length) {
    throw new BundleError("duplicate trial ids in bundle");
  }
  const bundle = new StudyBundle(dir, manifest);
  for (const trial of manifest.trials) {
    if (sha256File(bundle.audioPath(trial.wav)) !== trial.sha256) {
      throw new BundleError(`hash mismatch for ${trial.wav}`);
    }
  }
  for (const [relPath, expected] of Object.entries(manifest.context_sha256 ?? {})) {
    if (sha256File(bundle.audioPath(relPath)) !== expected) {
      throw new BundleError(`hash mismatch for ${relPath}`);
    }
  }
  return bundle;
}
