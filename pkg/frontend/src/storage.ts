/**
 * Browser-storage helpers, namespaced per run so two runs served at
 * different times never share progress.
 */

export function runKey(runId: string, suffix: string): string {
  return `annotate-ui.${runId}.${suffix}`;
}

export function readJson<T>(storage: Storage, key: string, fallback: T): T {
  const raw = storage.getItem(key);
  if (raw === null) {
    return fallback;
  }
  try {
    return JSON.parse(raw) as T;
  } catch {
    return fallback;
  }
}

export function writeJson(storage: Storage, key: string, value: unknown): void {
  storage.setItem(key, JSON.stringify(value));
}
