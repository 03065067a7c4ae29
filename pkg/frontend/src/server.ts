/** HTTP service: static rater page, blind trial payloads, audio
 * streaming, rating collection, aggregate report.
 *
 * Routes:
 *   GET  /                                  rater single-page app
 *   GET  /api/next-trial?rater=ID           next unrated trial (or done)
 *   GET  /api/audio/:rater/:pos/main        transformed clip for that slot
 *   GET  /api/audio/:rater/:pos/context     exemplar-output clip (REL context)
 *   POST /api/rating                        {rater_id, position, ovl, rel}
 *   GET  /api/aggregates                    per-condition means and 95% CIs
 *
 * The aggregate report names conditions; trial payloads and audio URLs
 * never do.
 */

import { createServer, IncomingMessage, Server, ServerResponse } from "node:http";
import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import { StudyBundle } from "./bundle.js";
import { RatingError, RatingStore } from "./store.js";
import { checkRaterId, SessionError, StudySession } from "./trials.js";

const MAX_BODY_BYTES = 16 * 1024;

function sendJson(res: ServerResponse, status: number, body: unknown): void {
  const text = JSON.stringify(body);
  res.writeHead(status, {
    "content-type": "application/json; charset=utf-8",
    "cache-control": "no-store",
  });
  res.end(text);
}

function readBody(req: IncomingMessage): Promise<string> {
  return new Promise((resolve, reject) => {
    const chunks: Buffer[] = [];
    let size = 0;
    req.on("data", (chunk: Buffer) => {
      size += chunk.length;
      if (size > MAX_BODY_BYTES) {
        reject(new Error("request body too large"));
        req.destroy();
        return;
      }
      chunks.push(chunk);
    });
    req.on("end", () => resolve(Buffer.concat(chunks).toString("utf-8")));
    req.on("error", reject);
  });
}

function ratingStatus(error: RatingError): number {
  return error.code === "duplicate" ? 409 : 400;
}

export function createStudyServer(bundle: StudyBundle, store: RatingStore): Server {
  const session = new StudySession(bundle, store);
  const staticDir = join(dirname(fileURLToPath(import.meta.url)), "..", "static");
  const indexHtml = readFileSync(join(staticDir, "index.html"));

  return createServer((req, res) => {
    void handle(req, res).catch((error: unknown) => {
      if (!res.headersSent) {
        sendJson(res, 500, { error: String(error) });
      } else {
        res.end();
      }
    });
  });

  async function handle(req: IncomingMessage, res: ServerResponse): Promise<void> {
    const url = new URL(req.url ?? "/", "http://localhost");
    const path = url.pathname;

    if (req.method === "GET" && (path === "/" || path === "/index.html")) {
      res.writeHead(200, { "content-type": "text/html; charset=utf-8" });
      res.end(indexHtml);
      return;
    }

    if (req.method === "GET" && path === "/api/next-trial") {
      let raterId: string;
      try {
        raterId = checkRaterId(url.searchParams.get("rater"));
      } catch (error) {
        sendJson(res, 400, { error: String(error) });
        return;
      }
      sendJson(res, 200, session.nextFor(raterId));
      return;
    }

    const audio = path.match(/^\/api\/audio\/([^/]+)\/(\d+)\/(main|context)$/);
    if (req.method === "GET" && audio) {
      try {
        const raterId = checkRaterId(decodeURIComponent(audio[1]!));
        const trial = session.trialAt(raterId, Number(audio[2]));
        const relPath = audio[3] === "main" ? trial.wav : trial.rel_context_wav;
        if (relPath === null) {
          sendJson(res, 404, { error: "this trial has no context clip" });
          return;
        }
        const data = bundle.readAudio(relPath);
        res.writeHead(200, {
          "content-type": "audio/wav",
          "content-length": data.length,
          "cache-control": "no-store",
        });
        res.end(data);
      } catch (error) {
        sendJson(res, error instanceof SessionError ? 404 : 400, { error: String(error) });
      }
      return;
    }

    if (req.method === "POST" && path === "/api/rating") {
      let parsed: { rater_id?: unknown; position?: unknown; ovl?: unknown; rel?: unknown };
      try {
        parsed = JSON.parse(await readBody(req)) as typeof parsed;
      } catch (error) {
        sendJson(res, 400, { error: `bad request body: ${String(error)}` });
        return;
      }
      try {
        const raterId = checkRaterId(parsed.rater_id);
        const trial = session.trialAt(raterId, Number(parsed.position));
        store.add({
          rater_id: raterId,
          trial_id: trial.trial_id,
          ovl: parsed.ovl as number,
          rel: parsed.rel as number,
          timestamp: new Date().toISOString(),
        });
        const next = session.nextFor(raterId);
        sendJson(res, 201, { ok: true, next });
      } catch (error) {
        if (error instanceof RatingError) {
          sendJson(res, ratingStatus(error), { error: error.message, code: error.code });
        } else if (error instanceof SessionError) {
          sendJson(res, 400, { error: error.message });
        } else {
          throw error;
        }
      }
      return;
    }

    if (req.method === "GET" && path === "/api/aggregates") {
      sendJson(res, 200, {
        n_trials: bundle.trials.length,
        ratings: store.all().length,
        conditions: session.report(),
      });
      return;
    }

    sendJson(res, 404, { error: `no route for ${req.method} ${path}` });
  }
}
