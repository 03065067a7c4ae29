/** Test fixture: write a miniature study bundle the way the experiment
 * harness exports one (same manifest shape, real sha256 hashes). */

import { createHash } from "node:crypto";
import { mkdirSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import type { BundleManifest, BundleTrial } from "../src/bundle.js";

const CONDITIONS = ["ground_truth", "model", "pure_noise"];

/** Minimal valid RIFF/WAVE container holding distinctive PCM bytes. */
export function tinyWav(tag: number): Buffer {
  const samples = Buffer.alloc(64);
  for (let i = 0; i < 32; i++) samples.writeInt16LE(((tag * 37 + i * 11) % 251) - 125, i * 2);
  const header = Buffer.alloc(44);
  header.write("RIFF", 0);
  header.writeUInt32LE(36 + samples.length, 4);
  header.write("WAVE", 8);
  header.write("fmt ", 12);
  header.writeUInt32LE(16, 16);
  header.writeUInt16LE(1, 20); // PCM
  header.writeUInt16LE(1, 22); // mono
  header.writeUInt32LE(16000, 24);
  header.writeUInt32LE(32000, 28);
  header.writeUInt16LE(2, 32);
  header.writeUInt16LE(16, 34);
  header.write("data", 36);
  header.writeUInt32LE(samples.length, 40);
  return Buffer.concat([header, samples]);
}

function sha256(data: Buffer): string {
  return createHash("sha256").update(data).digest("hex");
}

export function writeBundle(dir: string, nSamples = 2, withContext = true): BundleManifest {
  mkdirSync(join(dir, "audio"), { recursive: true });
  const contextSha: Record<string, string> = {};
  const contextPaths: (string | null)[] = [];
  for (let index = 0; index < nSamples; index++) {
    if (withContext) {
      const relPath = `audio/context_${String(index).padStart(3, "0")}.wav`;
      const data = tinyWav(1000 + index);
      writeFileSync(join(dir, relPath), data);
      contextSha[relPath] = sha256(data);
      contextPaths.push(relPath);
    } else {
      contextPaths.push(null);
    }
  }
  const trials: BundleTrial[] = [];
  let tag = 0;
  for (let index = 0; index < nSamples; index++) {
    for (const condition of CONDITIONS) {
      const relPath = `audio/${condition}_${String(index).padStart(3, "0")}.wav`;
      const data = tinyWav(tag++);
      writeFileSync(join(dir, relPath), data);
      trials.push({
        trial_id: `t${String(index).padStart(3, "0")}_${condition}`,
        sample_index: index,
        condition,
        wav: relPath,
        sha256: sha256(data),
        rel_context_wav: contextPaths[index]!,
      });
    }
  }
  const manifest: BundleManifest = {
    version: 1,
    n_samples: nSamples,
    conditions: [...CONDITIONS],
    permutation_algo: "fnv1a64-splitmix64-fisher-yates",
    context_sha256: contextSha,
    trials,
  };
  writeFileSync(join(dir, "bundle.json"), JSON.stringify(manifest, null, 2) + "\n");
  return manifest;
}
