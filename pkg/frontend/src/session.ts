// Portal session: one login covers the citizen area and the operator inbox.
// Only the bearer token is held; credentials never outlive the login call,
// and an expired/invalid token clears the whole session.

import { GatewayClient, GatewayError } from './api.js';
import type { Profile } from './types.js';

export interface PortalSession {
  token: string;
  userId: string;
  level: 'weak' | 'strong';
  profile: Profile | null;
}

export class SessionStore {
  private session: PortalSession | null = null;
  private listeners: Array<(s: PortalSession | null) => void> = [];

  get current(): PortalSession | null {
    return this.session;
  }

  onChange(listener: (s: PortalSession | null) => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener(this.session);
  }

  async login(client: GatewayClient, userId: string, password: string): Promise<PortalSession> {
    const result = await client.login(userId, password);
    let profile: Profile | null = null;
    try {
      profile = await client.getProfile(result.token);
    } catch {
      profile = null; // profile is a convenience cache, not a login requirement
    }
    this.session = {
      token: result.token,
      userId: result.user_id,
      level: result.level,
      profile,
    };
    this.emit();
    return this.session;
  }

  logout(): void {
    this.session = null;
    this.emit();
  }

  // Call with any gateway error: auth failures drop the session so the UI
  // falls back to the login view instead of hammering dead tokens.
  absorbError(err: unknown): boolean {
    if (err instanceof GatewayError && err.isAuthFailure) {
      this.logout();
      return true;
    }
    return false;
  }
}
