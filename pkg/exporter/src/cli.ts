#!/usr/bin/env node
/** Usage: genret-export <manifest.json> <out.feat> */

import { exportFeatures } from "./export.js";
import { ManifestError } from "./manifest.js";
import { NpyFormatError } from "./npy.js";

function main(argv: string[]): number {
  if (argv.length !== 2) {
    console.error("usage: genret-export <manifest.json> <out.feat>");
    return 2;
  }
  try {
    const summary = exportFeatures(argv[0], argv[1]);
    console.log(
      `wrote ${summary.count} ${summary.kind} records ` +
        `(dim ${summary.dimension}, ${summary.bytes} bytes) to ${argv[1]}`,
    );
    return 0;
  } catch (err) {
    if (err instanceof ManifestError || err instanceof NpyFormatError) {
      console.error(`export error: ${err.message}`);
      return 2;
    }
    console.error(`i/o error: ${(err as Error).message}`);
    return 3;
  }
}

process.exit(main(process.argv.slice(2)));
