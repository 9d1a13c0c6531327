/** Frame-level energy/zero-crossing analysis shared by all the stand-in engines. */

import type { DecodedAudio } from "./wav.js";

export type Frame = {
  time: number;
  rms: number;
  /** zero crossings per sample, 0..1 */
  zcr: number;
};

export type Burst = {
  start: number;
  end: number;
  meanRms: number;
  meanZcr: number;
};

const FRAME_S = 0.02;
const HOP_S = 0.01;

export function frames(audio: DecodedAudio): Frame[] {
  const frameLen = Math.max(1, Math.round(audio.sampleRate * FRAME_S));
  const hop = Math.max(1, Math.round(audio.sampleRate * HOP_S));
  const out: Frame[] = [];
  for (let start = 0; start + frameLen <= audio.samples.length; start += hop) {
    let energy = 0;
    let crossings = 0;
    for (let i = start; i < start + frameLen; i++) {
      const v = audio.samples[i];
      energy += v * v;
      if (i > start && v * audio.samples[i - 1] < 0) crossings++;
    }
    out.push({
      time: start / audio.sampleRate,
      rms: Math.sqrt(energy / frameLen),
      zcr: crossings / (frameLen - 1 || 1),
    });
  }
  return out;
}

/** Group active frames into bursts, bridging single-frame dropouts. */
export function bursts(audio: DecodedAudio): Burst[] {
  const fs = frames(audio);
  let peak = 0;
  for (const f of fs) peak = Math.max(peak, f.rms);
  if (peak === 0) return [];
  const threshold = Math.max(0.1 * peak, 1e-4);

  const out: Burst[] = [];
  let run: Frame[] = [];
  let gap = 0;
  const flush = () => {
    if (run.length >= 3) {
      out.push({
        start: run[0].time,
        end: run[run.length - 1].time + FRAME_S,
        meanRms: run.reduce((a, f) => a + f.rms, 0) / run.length,
        meanZcr: run.reduce((a, f) => a + f.zcr, 0) / run.length,
      });
    }
    run = [];
  };
  for (const f of fs) {
    if (f.rms >= threshold) {
      run.push(f);
      gap = 0;
    } else if (run.length > 0 && gap === 0) {
      gap = 1; // bridge one quiet frame inside a burst
    } else {
      flush();
      gap = 0;
    }
  }
  flush();
  return out;
}

export function duration(audio: DecodedAudio): number {
  return audio.samples.length / audio.sampleRate;
}
