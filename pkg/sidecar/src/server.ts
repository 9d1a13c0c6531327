import { createApp } from "./app.js";
import { configFromEnv } from "./config.js";

const config = configFromEnv();
const { app, ready } = createApp(config);

app.listen(config.port, () => {
  console.log(`sidecar listening on :${config.port} (device ${config.device})`);
});
void ready.then(() => console.log("models loaded"));
