// Operator task inbox: list open work by role, claim it, complete it.
// A lost claim race (someone else got there first) is a refresh prompt,
// not an error.

import { GatewayClient, GatewayError } from './api.js';
import type { HumanTask, Profile } from './types.js';
import type { PortalSession } from './session.js';

export function operatorRoles(profile: Profile | null): string[] {
  if (!profile) return [];
  return profile.roles.filter((role) => role.startsWith('clerk:'));
}

export function canOperate(profile: Profile | null): boolean {
  return operatorRoles(profile).length > 0;
}

export type ClaimOutcome =
  | { kind: 'claimed'; task: HumanTask }
  | { kind: 'already_claimed' }
  | { kind: 'denied'; detail: string };

export class TaskInbox {
  constructor(private readonly client: GatewayClient) {}

  async refresh(role: string, state: 'open' | 'claimed' = 'open'): Promise<HumanTask[]> {
    return this.client.listTasks({ role, state });
  }

  async claim(taskId: string, session: PortalSession): Promise<ClaimOutcome> {
    try {
      return { kind: 'claimed', task: await this.client.claimTask(taskId, session.token) };
    } catch (err) {
      if (err instanceof GatewayError && err.code === 'AlreadyClaimed') {
        return { kind: 'already_claimed' };
      }
      if (err instanceof GatewayError && err.status === 403) {
        return { kind: 'denied', detail: err.message };
      }
      throw err;
    }
  }

  async complete(taskId: string, outcome: string, session: PortalSession) {
    return this.client.completeTask(taskId, outcome, session.token);
  }
}
