/**
 * Durable outbox for label posts that could not reach the server.
 *
 * A failed POST is appended here (and mirrored to browser storage) so the
 * label is never lost silently; flush() retries in order and stops at the
 * first failure so ordering is preserved across reconnects.
 */

import type { ManualLabel } from "./api";
import { readJson, writeJson } from "./storage";

export interface PendingLabel {
  sample_id: string;
  label: ManualLabel;
}

export class LabelOutbox {
  private pending: PendingLabel[];

  constructor(
    private readonly storage: Storage,
    private readonly key: string,
  ) {
    this.pending = readJson<PendingLabel[]>(storage, key, []);
  }

  items(): readonly PendingLabel[] {
    return this.pending;
  }

  size(): number {
    return this.pending.length;
  }

  push(item: PendingLabel): void {
    this.pending.push(item);
    writeJson(this.storage, this.key, this.pending);
  }

  /**
   * Send pending labels oldest-first. Returns how many were delivered;
   * the remainder stays queued when a send fails.
   */
  async flush(send: (item: PendingLabel) => Promise<void>): Promise<number> {
    let delivered = 0;
    while (this.pending.length > 0) {
      const head = this.pending[0]!;
      try {
        await send(head);
      } catch {
        break;
      }
      this.pending.shift();
      delivered += 1;
      writeJson(this.storage, this.key, this.pending);
    }
    return delivered;
  }
}
