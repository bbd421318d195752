// Live tracking of submitted requests: poll the instance snapshot every
// two seconds until it reaches a terminal status. The scheduler is
// injectable so tests drive the clock by hand; concurrent track() calls on
// one instance share a single poller. Finished requests stay listed.

import { GatewayClient } from './api.js';
import type { InstanceSnapshot, TransitionRecord } from './types.js';

export const POLL_INTERVAL_MS = 2000;

const TERMINAL = new Set(['completed', 'faulted']);

export interface TrackedRequest {
  instanceId: string;
  serviceTitle: string;
  status: string;
  feed: TransitionRecord[];
}

export type Scheduler = (fn: () => void | Promise<void>, ms: number) => void;

export class RequestTracker {
  private pollers = new Set<string>();
  private requests = new Map<string, TrackedRequest>();
  private readonly schedule: Scheduler;

  constructor(
    private readonly client: GatewayClient,
    scheduler?: Scheduler,
  ) {
    this.schedule = scheduler ?? ((fn, ms) => void setTimeout(fn, ms));
  }

  isPolling(instanceId: string): boolean {
    return this.pollers.has(instanceId);
  }

  list(): TrackedRequest[] {
    return [...this.requests.values()];
  }

  async track(
    instanceId: string,
    serviceTitle: string,
    onUpdate: (req: TrackedRequest) => void,
  ): Promise<TrackedRequest> {
    const existing = this.requests.get(instanceId);
    if (existing && this.pollers.has(instanceId)) return existing; // deduplicated client-side
    if (existing && TERMINAL.has(existing.status)) return existing;

    const tracked: TrackedRequest = existing ?? {
      instanceId,
      serviceTitle,
      status: 'running',
      feed: [],
    };
    this.requests.set(instanceId, tracked);
    this.pollers.add(instanceId);

    const apply = (snapshot: InstanceSnapshot) => {
      tracked.status = snapshot.status;
      tracked.feed = snapshot.history; // ordered by history position
      onUpdate(tracked);
    };

    const poll = async () => {
      if (!this.pollers.has(instanceId)) return;
      try {
        apply(await this.client.getInstance(instanceId));
      } catch {
        tracked.status = 'unreachable';
        onUpdate(tracked);
      }
      if (TERMINAL.has(tracked.status)) {
        this.pollers.delete(instanceId); // polling stops at terminal status
        return;
      }
      this.schedule(poll, POLL_INTERVAL_MS);
    };

    await poll();
    return tracked;
  }

  stop(instanceId: string): void {
    this.pollers.delete(instanceId);
  }
}
