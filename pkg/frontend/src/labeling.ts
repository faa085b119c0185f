/**
 * Stage-1 labeling view.
 *
 * Shows the input image and the model's albedo estimate side by side.
 * Keyboard shortcuts p/n/a submit positive/negative/ambiguous; the view
 * advances optimistically and posts in the background. A failed post goes
 * to the durable outbox and raises a retry banner, so no label is lost
 * silently; the outbox flushes on retry, on reconnect, and on restart.
 */

import { ApiError, LabelServeClient, ManualLabel, QueueItem } from "./api";
import { LabelOutbox, PendingLabel } from "./outbox";

const SHORTCUTS: Record<string, ManualLabel> = {
  p: "positive",
  n: "negative",
  a: "ambiguous",
};

function isTyping(target: EventTarget | null): boolean {
  return (
    target instanceof HTMLInputElement || target instanceof HTMLTextAreaElement
  );
}

export class LabelingView {
  private items: QueueItem[] = [];
  private index = 0;
  private total = 0;
  private readonly log: PendingLabel[] = [];
  private readonly keyHandler: (event: KeyboardEvent) => void;
  private readonly onlineHandler: () => void;

  constructor(
    private readonly root: HTMLElement,
    private readonly client: LabelServeClient,
    private readonly outbox: LabelOutbox,
  ) {
    this.keyHandler = (event) => {
      const label = SHORTCUTS[event.key.toLowerCase()];
      if (label === undefined || isTyping(event.target)) {
        return;
      }
      event.preventDefault();
      void this.submit(label);
    };
    this.onlineHandler = () => {
      void this.flushOutbox();
    };
  }

  /** One entry per user labeling action, in order. */
  actionLog(): readonly PendingLabel[] {
    return this.log;
  }

  async start(): Promise<void> {
    this.renderSkeleton();
    await this.flushOutbox();
    const queue = await this.client.queue();
    const pending = new Set(this.outbox.items().map((p) => p.sample_id));
    this.items = queue.items.filter((item) => !pending.has(item.sample_id));
    this.total = this.items.length;
    this.index = 0;
    document.addEventListener("keydown", this.keyHandler);
    window.addEventListener("online", this.onlineHandler);
    this.render();
  }

  destroy(): void {
    document.removeEventListener("keydown", this.keyHandler);
    window.removeEventListener("online", this.onlineHandler);
  }

  async submit(label: ManualLabel): Promise<void> {
    const item = this.items[this.index];
    if (item === undefined) {
      return;
    }
    this.log.push({ sample_id: item.sample_id, label });
    this.index += 1; // optimistic advance; delivery is handled below
    this.render();
    try {
      await this.client.label(item.sample_id, label);
    } catch (err) {
      if (err instanceof ApiError) {
        this.setBanner(`server rejected label: ${err.message}`);
      } else {
        this.outbox.push({ sample_id: item.sample_id, label });
        this.setBanner("offline: label queued, will retry");
      }
      return;
    }
    if (this.outbox.size() === 0) {
      this.setBanner(null);
    }
  }

  async flushOutbox(): Promise<void> {
    if (this.outbox.size() > 0) {
      await this.outbox.flush(async (p) => {
        await this.client.label(p.sample_id, p.label);
      });
    }
    this.setBanner(
      this.outbox.size() > 0 ? "offline: label queued, will retry" : null,
    );
  }

  private renderSkeleton(): void {
    this.root.innerHTML = `
      <div class="banner hidden" data-role="banner">
        <span data-role="banner-text"></span>
        <button type="button" data-role="retry">retry now</button>
      </div>
      <div class="progress" data-role="progress"></div>
      <div class="panes" data-role="panes">
        <figure><img data-role="condition" alt="input image"><figcaption>input</figcaption></figure>
        <figure><img data-role="estimate" alt="albedo estimate"><figcaption>estimate</figcaption></figure>
      </div>
      <div class="controls" data-role="controls">
        <button type="button" data-label="positive">positive (p)</button>
        <button type="button" data-label="negative">negative (n)</button>
        <button type="button" data-label="ambiguous">ambiguous (a)</button>
      </div>
      <div class="done hidden" data-role="done">All items labeled.</div>
    `;
    this.query("[data-role=retry]").addEventListener("click", () => {
      void this.flushOutbox();
    });
    for (const button of this.root.querySelectorAll<HTMLButtonElement>(
      "button[data-label]",
    )) {
      button.addEventListener("click", () => {
        void this.submit(button.dataset["label"] as ManualLabel);
      });
    }
  }

  private render(): void {
    const done = this.index >= this.items.length;
    this.query("[data-role=progress]").textContent =
      `${Math.min(this.index, this.total)} / ${this.total}`;
    this.query("[data-role=panes]").classList.toggle("hidden", done);
    this.query("[data-role=controls]").classList.toggle("hidden", done);
    this.query("[data-role=done]").classList.toggle("hidden", !done);
    const item = this.items[this.index];
    if (item !== undefined) {
      this.query<HTMLImageElement>("[data-role=condition]").src =
        this.client.imageUrl(item.condition_url);
      this.query<HTMLImageElement>("[data-role=estimate]").src =
        this.client.imageUrl(item.estimate_url);
    }
  }

  private setBanner(text: string | null): void {
    this.query("[data-role=banner]").classList.toggle("hidden", text === null);
    this.query("[data-role=banner-text]").textContent = text ?? "";
  }

  private query<T extends Element = HTMLElement>(selector: string): T {
    const el = this.root.querySelector<T>(selector);
    if (el === null) {
      throw new Error(`missing element ${selector}`);
    }
    return el;
  }
}
