// Small concurrency helpers shared by the panels.

// Trailing-edge debounce; the timer type works in both browser and node.
export function debounce<A extends unknown[]>(
  fn: (...args: A) => void,
  waitMs: number,
): (...args: A) => void {
  let timer: ReturnType<typeof setTimeout> | null = null;
  return (...args: A) => {
    if (timer !== null) clearTimeout(timer);
    timer = setTimeout(() => {
      timer = null;
      fn(...args);
    }, waitMs);
  };
}

// One in-flight request per panel: while busy, further launches are
// refused (the caller disables its button or drops the event).
export class Gate {
  private busy = false;

  get isBusy(): boolean {
    return this.busy;
  }

  async run<T>(task: () => Promise<T>): Promise<T | undefined> {
    if (this.busy) return undefined;
    this.busy = true;
    try {
      return await task();
    } finally {
      this.busy = false;
    }
  }
}

// The service base URL comes from the ?service= query parameter; with no
// parameter the console talks to its own origin.
export function serviceBaseUrl(search: string): string {
  const params = new URLSearchParams(search);
  const service = params.get("service");
  if (!service) return "";
  return service.replace(/\/+$/, "");
}
