/**
 * Blind pairwise preference view.
 *
 * Shows the input image and two anonymized albedo estimates under opaque
 * a/b slots; which side holds which model is a server-side secret and
 * never appears in the markup. Keyboard 1/2 (or the buttons) votes for
 * a/b. Votes must reach the server before the view advances, so a network
 * failure keeps the current pair on screen with a retry banner. The view
 * resumes at the first unvoted pair after a refresh, using the server's
 * session votes plus a per-run local cache.
 */

import { ApiError, LabelServeClient, PairItem, Slot } from "./api";
import { readJson, runKey, writeJson } from "./storage";

function isTyping(target: EventTarget | null): boolean {
  return (
    target instanceof HTMLInputElement || target instanceof HTMLTextAreaElement
  );
}

export class PreferenceView {
  private pairs: PairItem[] = [];
  private voted: Record<string, Slot> = {};
  private index = 0;
  private readonly votesKey: string;
  private readonly keyHandler: (event: KeyboardEvent) => void;

  constructor(
    private readonly root: HTMLElement,
    private readonly client: LabelServeClient,
    private readonly storage: Storage,
    runId: string,
  ) {
    this.votesKey = runKey(runId, "votes");
    this.keyHandler = (event) => {
      if (isTyping(event.target)) {
        return;
      }
      if (event.key === "1" || event.key === "2") {
        event.preventDefault();
        void this.vote(event.key === "1" ? "a" : "b");
      }
    };
  }

  async start(): Promise<void> {
    this.renderSkeleton();
    const [pairs, votes] = await Promise.all([
      this.client.pairs(),
      this.client.votes(),
    ]);
    this.pairs = pairs.pairs;
    this.voted = readJson<Record<string, Slot>>(this.storage, this.votesKey, {});
    for (const pair of this.pairs) {
      if (pair.voted !== null) {
        this.voted[pair.pair_id] = pair.voted;
      }
    }
    Object.assign(this.voted, votes.votes);
    writeJson(this.storage, this.votesKey, this.voted);
    this.index = this.firstUnvoted();
    document.addEventListener("keydown", this.keyHandler);
    this.render();
  }

  destroy(): void {
    document.removeEventListener("keydown", this.keyHandler);
  }

  /** Index of the pair currently on screen (pairs.length when done). */
  position(): number {
    return this.index;
  }

  async vote(slot: Slot): Promise<void> {
    const pair = this.pairs[this.index];
    if (pair === undefined) {
      return;
    }
    try {
      await this.client.vote(pair.pair_id, slot);
    } catch (err) {
      this.setBanner(
        err instanceof ApiError
          ? `server rejected vote: ${err.message}`
          : "offline: vote not recorded, retry",
      );
      return;
    }
    this.voted[pair.pair_id] = slot;
    writeJson(this.storage, this.votesKey, this.voted);
    this.setBanner(null);
    this.index = this.firstUnvoted();
    this.render();
  }

  private firstUnvoted(): number {
    const i = this.pairs.findIndex((p) => !(p.pair_id in this.voted));
    return i === -1 ? this.pairs.length : i;
  }

  private renderSkeleton(): void {
    this.root.innerHTML = `
      <div class="banner hidden" data-role="banner">
        <span data-role="banner-text"></span>
      </div>
      <div class="progress" data-role="progress"></div>
      <figure class="cond" data-role="cond-pane">
        <img data-role="condition" alt="input image"><figcaption>input</figcaption>
      </figure>
      <div class="pair" data-role="pair-pane">
        <figure>
          <img data-role="image-a" alt="estimate a">
          <button type="button" data-slot="a">prefer left (1)</button>
        </figure>
        <figure>
          <img data-role="image-b" alt="estimate b">
          <button type="button" data-slot="b">prefer right (2)</button>
        </figure>
      </div>
      <div class="done hidden" data-role="done">All pairs voted.</div>
    `;
    for (const button of this.root.querySelectorAll<HTMLButtonElement>(
      "button[data-slot]",
    )) {
      button.addEventListener("click", () => {
        void this.vote(button.dataset["slot"] as Slot);
      });
    }
  }

  private render(): void {
    const done = this.index >= this.pairs.length;
    const votedCount = Object.keys(this.voted).length;
    this.query("[data-role=progress]").textContent =
      `${votedCount} / ${this.pairs.length}`;
    this.query("[data-role=cond-pane]").classList.toggle("hidden", done);
    this.query("[data-role=pair-pane]").classList.toggle("hidden", done);
    this.query("[data-role=done]").classList.toggle("hidden", !done);
    const pair = this.pairs[this.index];
    if (pair !== undefined) {
      this.query<HTMLImageElement>("[data-role=condition]").src =
        this.client.imageUrl(pair.condition_url);
      this.query<HTMLImageElement>("[data-role=image-a]").src =
        this.client.imageUrl(pair.a_url);
      this.query<HTMLImageElement>("[data-role=image-b]").src =
        this.client.imageUrl(pair.b_url);
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
