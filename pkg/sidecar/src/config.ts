import { z } from "zod";

/** Service configuration; model fields are identifiers reported by /health. */
export const adapterConfigSchema = z
  .object({
    port: z.number().int().min(1).max(65535).default(8077),
    asrModel: z.string().min(1).default("paraformer-zh"),
    embedModel: z.string().min(1).default("wavlm-large"),
    detectModel: z.string().min(1).default("para-detector-v1"),
    tagModel: z.string().min(1).default("para-tagger-v1"),
    device: z.string().min(1).default("cpu"),
    maxBatch: z.number().int().min(1).default(8),
  })
  .strict();

export type AdapterConfig = z.infer<typeof adapterConfigSchema>;

export function configFromEnv(env: NodeJS.ProcessEnv = process.env): AdapterConfig {
  const raw: Record<string, unknown> = {};
  if (env.ADAPTER_PORT !== undefined) raw.port = Number(env.ADAPTER_PORT);
  if (env.ADAPTER_ASR_MODEL) raw.asrModel = env.ADAPTER_ASR_MODEL;
  if (env.ADAPTER_EMBED_MODEL) raw.embedModel = env.ADAPTER_EMBED_MODEL;
  if (env.ADAPTER_DETECT_MODEL) raw.detectModel = env.ADAPTER_DETECT_MODEL;
  if (env.ADAPTER_TAG_MODEL) raw.tagModel = env.ADAPTER_TAG_MODEL;
  if (env.ADAPTER_DEVICE) raw.device = env.ADAPTER_DEVICE;
  if (env.ADAPTER_MAX_BATCH !== undefined) raw.maxBatch = Number(env.ADAPTER_MAX_BATCH);
  return adapterConfigSchema.parse(raw);
}
