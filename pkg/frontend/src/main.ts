// Entry point: read the service base URL, pull the three bootstrap
// resources, and hand everything to the console.

import { Client } from "./api.js";
import { ProbeSession } from "./session.js";
import { Console } from "./ui.js";
import { serviceBaseUrl } from "./util.js";

async function boot(): Promise<void> {
  const banner = document.querySelector("#boot-error") as HTMLElement;
  banner.textContent = "";
  banner.classList.add("hidden");
  const client = new Client(serviceBaseUrl(window.location.search));
  try {
    const health = await client.health();
    const [trials, masks] = await Promise.all([client.trials(), client.masks()]);
    const session = new ProbeSession(client.baseUrl, health.beta_grid);
    new Console(document, client, session, health, trials, masks).boot();
  } catch (err) {
    banner.classList.remove("hidden");
    const text = document.createElement("div");
    text.textContent =
      `could not reach the service at '${client.baseUrl || "(same origin)"}': ` +
      (err instanceof Error ? err.message : String(err));
    banner.appendChild(text);
    const retry = document.createElement("button");
    retry.textContent = "retry";
    retry.addEventListener("click", () => void boot());
    banner.appendChild(retry);
  }
}

void boot();
