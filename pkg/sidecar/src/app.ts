import { readFile } from "node:fs/promises";

import express, { type Express, type Request, type Response } from "express";
import { z } from "zod";

import type { AdapterConfig } from "./config.js";
import { loadEngines, type Engines } from "./engines.js";
import { parseWav, UnreadableAudio, type DecodedAudio } from "./wav.js";

const audioFields = {
  audio_ref: z.string().min(1).optional(),
  audio_b64: z.string().min(1).optional(),
};
const hasAudio = (v: { audio_ref?: string; audio_b64?: string }) =>
  v.audio_ref !== undefined || v.audio_b64 !== undefined;
const NEED_AUDIO = "request must carry audio_ref or audio_b64";

const plainAudioBody = z.object(audioFields).strict().refine(hasAudio, NEED_AUDIO);
const rawAudioBody = z
  .object({ ...audioFields, raw: z.string().optional() })
  .strict()
  .refine(hasAudio, NEED_AUDIO);

type PlainAudioBody = z.infer<typeof plainAudioBody>;
type RawAudioBody = z.infer<typeof rawAudioBody>;

const BASE64_SHAPE = /^[A-Za-z0-9+/\s]*={0,2}\s*$/;

async function resolveAudio(body: PlainAudioBody | RawAudioBody): Promise<DecodedAudio> {
  let bytes: Buffer;
  if (body.audio_ref !== undefined) {
    try {
      bytes = await readFile(body.audio_ref);
    } catch {
      throw new UnreadableAudio(`cannot read audio at ${body.audio_ref}`);
    }
  } else {
    if (!BASE64_SHAPE.test(body.audio_b64!)) throw new UnreadableAudio("audio_b64 is not base64");
    bytes = Buffer.from(body.audio_b64!, "base64");
  }
  return parseWav(bytes);
}

/** Bounds concurrent inference at the configured batch width. */
class InferenceGate {
  private active = 0;
  private waiters: Array<() => void> = [];

  constructor(private readonly limit: number) {}

  async run<T>(fn: () => T | Promise<T>): Promise<T> {
    if (this.active >= this.limit) {
      await new Promise<void>((resolve) => this.waiters.push(resolve));
    }
    this.active++;
    try {
      return await fn();
    } finally {
      this.active--;
      this.waiters.shift()?.();
    }
  }
}

export type App = {
  app: Express;
  /** resolves once the engines are loaded and requests stop drawing 503 */
  ready: Promise<void>;
  config: AdapterConfig;
};

export function createApp(
  config: AdapterConfig,
  loader: (config: AdapterConfig) => Promise<Engines> = loadEngines,
): App {
  const app = express();
  app.use(express.json({ limit: "32mb" }));

  let engines: Engines | null = null;
  const ready = loader(config).then((loaded) => {
    engines = loaded;
  });
  const gate = new InferenceGate(config.maxBatch);

  const models = {
    asr: config.asrModel,
    embed: config.embedModel,
    detect: config.detectModel,
    tag: config.tagModel,
  };

  app.get("/health", (_req, res) => {
    res.json({ status: engines ? "ok" : "loading", models });
  });

  function endpoint<B>(
    path: string,
    schema: z.ZodType<B>,
    handle: (engines: Engines, body: B, audio: DecodedAudio) => unknown,
  ) {
    app.post(path, (req: Request, res: Response) => {
      void (async () => {
        if (!engines) {
          res.status(503).json({ error: "models are still loading" });
          return;
        }
        const loaded = engines;
        const parsed = schema.safeParse(req.body);
        if (!parsed.success) {
          res.status(400).json({ error: parsed.error.issues[0]?.message ?? "malformed request" });
          return;
        }
        try {
          const audio = await resolveAudio(parsed.data as PlainAudioBody);
          const reply = await gate.run(() => handle(loaded, parsed.data, audio));
          res.json(reply);
        } catch (err) {
          if (err instanceof UnreadableAudio) {
            res.status(422).json({ error: err.message });
          } else {
            res.status(500).json({ error: err instanceof Error ? err.message : "internal error" });
          }
        }
      })();
    });
  }

  endpoint("/asr/transcribe", plainAudioBody, (e, _body, audio) => ({
    text: e.asr.transcribe(audio),
  }));
  endpoint("/embed/speaker", plainAudioBody, (e, _body, audio) => ({
    vector: e.embed.embed(audio),
  }));
  endpoint("/para/detect", rawAudioBody, (e, body, audio) => ({
    events: e.detect.detect(audio, (body as RawAudioBody).raw),
  }));
  endpoint("/para/tag", rawAudioBody, (e, body, audio) => ({
    tagged_text: e.tag.tag(audio, (body as RawAudioBody).raw),
  }));

  // express.json() SyntaxError and everything else unhandled: malformed request
  app.use((err: unknown, _req: Request, res: Response, _next: express.NextFunction) => {
    if (res.headersSent) return;
    res.status(400).json({ error: err instanceof Error ? err.message : "malformed request" });
  });

  return { app, ready, config };
}
