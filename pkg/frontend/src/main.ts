/** Entry point: serve a study bundle to raters.
 *
 *   node dist/main.js --bundle <dir> [--log ratings.jsonl] [--port 8377]
 */

import { parseArgs } from "node:util";

import { loadBundle } from "./bundle.js";
import { createStudyServer } from "./server.js";
import { RatingStore } from "./store.js";

const { values } = parseArgs({
  options: {
    bundle: { type: "string" },
    log: { type: "string", default: "ratings.jsonl" },
    port: { type: "string", default: "8377" },
  },
});

if (!values.bundle) {
  console.error("usage: main.js --bundle <dir> [--log ratings.jsonl] [--port 8377]");
  process.exit(2);
}

const bundle = loadBundle(values.bundle);
const store = new RatingStore(values.log!, new Set(bundle.trialById.keys()));
const server = createStudyServer(bundle, store);
server.listen(Number(values.port), () => {
  const address = server.address();
  const port = typeof address === "object" && address ? address.port : values.port;
  console.log(`serving ${bundle.trials.length} trials from ${values.bundle} ` +
              `on http://localhost:${port} (log: ${values.log})`);
});
