/**
 * Entry point: wires the label server client to the two views and a
 * small tab switcher. The server origin defaults to the page's own and
 * can be overridden with ?api=http://host:port for local development.
 */

import { LabelServeClient } from "./api";
import { LabelingView } from "./labeling";
import { LabelOutbox } from "./outbox";
import { PreferenceView } from "./preference";
import { runKey } from "./storage";

type Tab = "label" | "compare";

function apiBase(): string {
  const override = new URLSearchParams(window.location.search).get("api");
  return (override ?? window.location.origin).replace(/\/$/, "");
}

async function boot(): Promise<void> {
  const client = new LabelServeClient(apiBase());
  const health = await client.health();
  const runId = health.run;
  const storage = window.localStorage;

  const status = document.querySelector<HTMLElement>("#status");
  if (status !== null) {
    status.textContent = `run ${runId}, iteration ${health.iteration}`;
  }

  const labelRoot = document.querySelector<HTMLElement>("#label-view");
  const compareRoot = document.querySelector<HTMLElement>("#compare-view");
  if (labelRoot === null || compareRoot === null) {
    throw new Error("missing view containers");
  }

  const outbox = new LabelOutbox(storage, runKey(runId, "outbox"));
  let labeling: LabelingView | null = null;
  let preference: PreferenceView | null = null;

  async function show(tab: Tab): Promise<void> {
    labelRoot!.classList.toggle("hidden", tab !== "label");
    compareRoot!.classList.toggle("hidden", tab !== "compare");
    for (const button of document.querySelectorAll<HTMLButtonElement>(
      "nav button[data-tab]",
    )) {
      button.classList.toggle("active", button.dataset["tab"] === tab);
    }
    if (tab === "label") {
      preference?.destroy();
      preference = null;
      labeling = new LabelingView(labelRoot!, client, outbox);
      await labeling.start();
    } else {
      labeling?.destroy();
      labeling = null;
      preference = new PreferenceView(compareRoot!, client, storage, runId);
      await preference.start();
    }
  }

  for (const button of document.querySelectorAll<HTMLButtonElement>(
    "nav button[data-tab]",
  )) {
    button.addEventListener("click", () => {
      void show(button.dataset["tab"] as Tab);
    });
  }

  await show("label");
}

void boot().catch((err: unknown) => {
  const status = document.querySelector<HTMLElement>("#status");
  if (status !== null) {
    status.textContent = `failed to reach label server: ${String(err)}`;
  }
});
