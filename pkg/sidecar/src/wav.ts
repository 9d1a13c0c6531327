/** Minimal RIFF/WAVE reader for PCM16 audio; anything else is unreadable. */

export class UnreadableAudio extends Error {}

export type DecodedAudio = {
  sampleRate: number;
  /** mono samples in [-1, 1]; stereo input is averaged down */
  samples: Float32Array;
};

export function parseWav(bytes: Buffer): DecodedAudio {
  if (bytes.length < 44 || bytes.toString("ascii", 0, 4) !== "RIFF" || bytes.toString("ascii", 8, 12) !== "WAVE") {
    throw new UnreadableAudio("not a RIFF/WAVE file");
  }

  let offset = 12;
  let format: { channels: number; sampleRate: number; bits: number } | null = null;
  let data: Buffer | null = null;
  while (offset + 8 <= bytes.length) {
    const id = bytes.toString("ascii", offset, offset + 4);
    const size = bytes.readUInt32LE(offset + 4);
    const body = bytes.subarray(offset + 8, offset + 8 + size);
    if (id === "fmt ") {
      if (size < 16) throw new UnreadableAudio("truncated fmt chunk");
      const audioFormat = body.readUInt16LE(0);
      if (audioFormat !== 1) throw new UnreadableAudio(`unsupported audio format ${audioFormat}, need PCM`);
      format = {
        channels: body.readUInt16LE(2),
        sampleRate: body.readUInt32LE(4),
        bits: body.readUInt16LE(14),
      };
    } else if (id === "data") {
      data = body;
    }
    offset += 8 + size + (size % 2); // chunks are word-aligned
  }

  if (!format || !data) throw new UnreadableAudio("missing fmt or data chunk");
  if (format.bits !== 16) throw new UnreadableAudio(`unsupported bit depth ${format.bits}, need 16`);
  if (format.channels < 1 || format.channels > 2) {
    throw new UnreadableAudio(`unsupported channel count ${format.channels}`);
  }
  if (format.sampleRate <= 0) throw new UnreadableAudio("invalid sample rate");
  if (data.length < 2 * format.channels) throw new UnreadableAudio("empty data chunk");

  const frames = Math.floor(data.length / (2 * format.channels));
  const samples = new Float32Array(frames);
  for (let i = 0; i < frames; i++) {
    let acc = 0;
    for (let c = 0; c < format.channels; c++) {
      acc += data.readInt16LE((i * format.channels + c) * 2);
    }
    samples[i] = acc / format.channels / 32768;
  }
  return { sampleRate: format.sampleRate, samples };
}
