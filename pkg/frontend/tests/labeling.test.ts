import { afterEach, describe, expect, it } from "vitest";

import { LabelServeClient } from "../src/api";
import { LabelingView } from "../src/labeling";
import { LabelOutbox } from "../src/outbox";
import { FakeLabelServe, memoryStorage } from "./fakeServer";

const BASE = "http://fake";
const OUTBOX_KEY = "annotate-ui.fake-run.outbox";

const cleanups: Array<() => void> = [];

afterEach(() => {
  while (cleanups.length > 0) {
    cleanups.pop()!();
  }
  document.body.innerHTML = "";
});

function sampleIds(count: number): string[] {
  return Array.from({ length: count }, (_, i) => `s${String(i).padStart(4, "0")}`);
}

function setup(itemCount = 3) {
  const fake = new FakeLabelServe(sampleIds(itemCount), 0);
  const storage = memoryStorage();
  const client = new LabelServeClient(BASE, fake.transport, storage);
  const outbox = new LabelOutbox(storage, OUTBOX_KEY);
  const root = document.createElement("div");
  document.body.appendChild(root);
  const view = new LabelingView(root, client, outbox);
  cleanups.push(() => view.destroy());
  return { fake, storage, client, outbox, root, view };
}

async function settle(): Promise<void> {
  for (let i = 0; i < 6; i++) {
    await new Promise((resolve) => setTimeout(resolve, 0));
  }
}

function press(key: string): void {
  document.dispatchEvent(new KeyboardEvent("keydown", { key, bubbles: true }));
}

function text(root: HTMLElement, selector: string): string {
  return root.querySelector(selector)?.textContent ?? "";
}

function hidden(root: HTMLElement, selector: string): boolean {
  return root.querySelector(selector)?.classList.contains("hidden") ?? true;
}

describe("labeling view", () => {
  it("keypress stores exactly one manual label and advances", async () => {
    const { fake, client, root, view } = setup(3);
    await view.start();
    expect(text(root, "[data-role=progress]")).toBe("0 / 3");

    press("p");
    await settle();

    expect(fake.labelRecords).toEqual([
      {
        sample_id: "s0000",
        label: "positive",
        provenance: "manual",
        session: client.sessionToken(),
      },
    ]);
    expect(fake.unlabeledIds()).not.toContain("s0000");
    expect(text(root, "[data-role=progress]")).toBe("1 / 3");

    const queue = await client.queue();
    expect(queue.total_unlabeled).toBe(2);
    expect(queue.items.map((item) => item.sample_id)).toEqual([
      "s0001",
      "s0002",
    ]);
  });

  it("each shortcut maps to one store record, in order", async () => {
    const { fake, root, view } = setup(3);
    await view.start();

    press("p");
    await settle();
    press("n");
    await settle();
    press("a");
    await settle();

    const expected = [
      { sample_id: "s0000", label: "positive" },
      { sample_id: "s0001", label: "negative" },
      { sample_id: "s0002", label: "ambiguous" },
    ];
    expect(view.actionLog()).toEqual(expected);
    expect(
      fake.labelRecords.map((r) => ({ sample_id: r.sample_id, label: r.label })),
    ).toEqual(expected);
    expect(text(root, "[data-role=progress]")).toBe("3 / 3");
    expect(hidden(root, "[data-role=done]")).toBe(false);
    expect(hidden(root, "[data-role=panes]")).toBe(true);
  });

  it("buttons submit the label named on them", async () => {
    const { fake, root, view } = setup(2);
    await view.start();

    root
      .querySelector<HTMLButtonElement>("button[data-label=negative]")!
      .click();
    await settle();

    expect(fake.labelRecords[0]?.label).toBe("negative");
    expect(fake.labelRecords[0]?.sample_id).toBe("s0000");
  });

  it("shows input and estimate for the current item", async () => {
    const { root, view } = setup(2);
    await view.start();

    const condition = root.querySelector<HTMLImageElement>(
      "[data-role=condition]",
    )!;
    const estimate = root.querySelector<HTMLImageElement>(
      "[data-role=estimate]",
    )!;
    expect(condition.src).toBe(`${BASE}/item/s0000/condition`);
    expect(estimate.src).toBe(`${BASE}/item/s0000/estimate`);

    press("p");
    await settle();
    expect(condition.src).toBe(`${BASE}/item/s0001/condition`);
    expect(estimate.src).toBe(`${BASE}/item/s0001/estimate`);
  });

  it("ignores shortcuts while typing in a form field", async () => {
    const { fake, root, view } = setup(2);
    await view.start();
    const input = document.createElement("input");
    root.appendChild(input);

    input.dispatchEvent(
      new KeyboardEvent("keydown", { key: "p", bubbles: true }),
    );
    await settle();

    expect(fake.labelRecords).toEqual([]);
    expect(text(root, "[data-role=progress]")).toBe("0 / 2");
  });

  it("queues the label locally when offline and flushes on reconnect", async () => {
    const { fake, outbox, root, view } = setup(3);
    await view.start();

    fake.failNetwork = true;
    press("p");
    await settle();

    expect(fake.labelRecords).toEqual([]);
    expect(outbox.size()).toBe(1);
    expect(text(root, "[data-role=progress]")).toBe("1 / 3");
    expect(hidden(root, "[data-role=banner]")).toBe(false);
    expect(text(root, "[data-role=banner-text]")).toContain("offline");

    fake.failNetwork = false;
    window.dispatchEvent(new Event("online"));
    await settle();

    expect(outbox.size()).toBe(0);
    expect(fake.labelRecords).toHaveLength(1);
    expect(fake.labelRecords[0]).toMatchObject({
      sample_id: "s0000",
      label: "positive",
      provenance: "manual",
    });
    expect(hidden(root, "[data-role=banner]")).toBe(true);
  });

  it("preserves label order across an outage", async () => {
    const { fake, outbox, root, view } = setup(3);
    await view.start();

    fake.failNetwork = true;
    press("p");
    await settle();
    press("n");
    await settle();
    expect(outbox.size()).toBe(2);

    fake.failNetwork = false;
    root.querySelector<HTMLButtonElement>("[data-role=retry]")!.click();
    await settle();

    expect(
      fake.labelRecords.map((r) => ({ sample_id: r.sample_id, label: r.label })),
    ).toEqual([
      { sample_id: "s0000", label: "positive" },
      { sample_id: "s0001", label: "negative" },
    ]);
    expect(outbox.size()).toBe(0);
  });

  it("delivers labels stranded by a previous session on startup", async () => {
    const { fake, storage, client, view } = setup(3);
    await view.start();
    fake.failNetwork = true;
    press("p");
    await settle();
    view.destroy();

    fake.failNetwork = false;
    const revived = new LabelOutbox(storage, OUTBOX_KEY);
    expect(revived.size()).toBe(1);
    const root = document.createElement("div");
    document.body.appendChild(root);
    const next = new LabelingView(root, client, revived);
    cleanups.push(() => next.destroy());
    await next.start();

    expect(fake.labelRecords).toHaveLength(1);
    expect(fake.labelRecords[0]?.sample_id).toBe("s0000");
    expect(revived.size()).toBe(0);
    expect(text(root, "[data-role=progress]")).toBe("0 / 2");
  });

  it("surfaces a server rejection instead of queueing it", async () => {
    const { fake, outbox, root, view } = setup(2);
    await view.start();

    fake.labelFailStatus = 400;
    press("p");
    await settle();

    expect(outbox.size()).toBe(0);
    expect(fake.labelRecords).toEqual([]);
    expect(hidden(root, "[data-role=banner]")).toBe(false);
    expect(text(root, "[data-role=banner-text]")).toContain("server rejected");
  });

  it("renders the done state for an empty queue", async () => {
    const { root, view } = setup(0);
    await view.start();

    expect(text(root, "[data-role=progress]")).toBe("0 / 0");
    expect(hidden(root, "[data-role=done]")).toBe(false);
    expect(hidden(root, "[data-role=panes]")).toBe(true);
    expect(hidden(root, "[data-role=controls]")).toBe(true);
  });
});
