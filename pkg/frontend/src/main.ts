import { ApiClient } from "./api.js";
import { App } from "./ui.js";

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const api = new ApiClient(params.get("api") ?? "");
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app element");
  const app = new App(root, api, {
    onError: (message) => console.error(message),
  });

  const sessionId = params.get("session");
  if (sessionId) {
    await app.resume(sessionId);
    return;
  }
  const checkpoints = await api.checkpoints();
  if (checkpoints.length === 0) {
    root.textContent = "no checkpoints available; train one first";
    return;
  }
  const wanted = params.get("checkpoint") ?? checkpoints[0]!.id;
  const seeds = Number(params.get("seeds") ?? "3");
  const rngSeed = params.has("rng_seed") ? Number(params.get("rng_seed")) : undefined;
  await app.start(wanted, seeds, rngSeed);
  const url = new URL(window.location.href);
  url.searchParams.set("session", app.state!.session_id);
  window.history.replaceState(null, "", url.toString());
}

boot().catch((e) => {
  const root = document.getElementById("app");
  if (root) root.textContent = `failed to start: ${e}`;
  console.error(e);
});
