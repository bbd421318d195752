// Thin client for the gateway HTTP API. Every value the portal shows comes
// through here — the portal itself holds no authoritative state.

import type {
  HumanTask,
  InstanceSnapshot,
  InvokeResult,
  LoginResponse,
  Profile,
  ServiceDescriptor,
  TaxonomyNode,
} from './types.js';

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class GatewayError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    detail: string,
  ) {
    super(`${code}: ${detail}`);
  }

  get isAuthFailure(): boolean {
    return this.status === 401;
  }
}

export class GatewayClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
    token?: string,
  ): Promise<T> {
    const headers: Record<string, string> = {};
    if (body !== undefined) headers['Content-Type'] = 'application/json';
    if (token) headers['Authorization'] = `Bearer ${token}`;
    let resp: Response;
    try {
      resp = await this.fetchImpl(this.baseUrl + path, {
        method,
        headers,
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (err) {
      throw new GatewayError(0, 'GatewayUnreachable', String(err));
    }
    const text = await resp.text();
    let payload: any = {};
    if (text) {
      try {
        payload = JSON.parse(text);
      } catch {
        payload = { error: 'BadPayload', detail: text.slice(0, 200) };
      }
    }
    if (!resp.ok) {
      throw new GatewayError(resp.status, payload.error ?? 'HttpError', payload.detail ?? text);
    }
    return payload as T;
  }

  health(): Promise<{ status: string }> {
    return this.request('GET', '/health');
  }

  login(userId: string, password: string): Promise<LoginResponse> {
    return this.request('POST', '/auth/login', { user_id: userId, password });
  }

  getProfile(token: string): Promise<Profile> {
    return this.request('GET', '/profile', undefined, token);
  }

  listTaxonomy(): Promise<TaxonomyNode[]> {
    return this.request<{ nodes: TaxonomyNode[] }>('GET', '/taxonomy').then((r) => r.nodes);
  }

  listServices(lifeEvent?: string, target?: string): Promise<ServiceDescriptor[]> {
    const params = new URLSearchParams();
    if (lifeEvent) params.set('life_event', lifeEvent);
    if (target) params.set('target', target);
    const query = params.toString();
    return this.request<{ services: ServiceDescriptor[] }>(
      'GET',
      '/services' + (query ? `?${query}` : ''),
    ).then((r) => r.services);
  }

  invokeService(
    serviceId: string,
    inputs: Record<string, string>,
    token?: string,
    correlation?: string,
  ): Promise<InvokeResult> {
    return this.request('POST', `/services/${serviceId}/invoke`, { inputs, correlation }, token);
  }

  getInstance(instanceId: string): Promise<InstanceSnapshot> {
    return this.request('GET', `/instances/${instanceId}`);
  }

  listTasks(filter: { role?: string; state?: string; instance?: string }): Promise<HumanTask[]> {
    const params = new URLSearchParams();
    if (filter.role) params.set('role', filter.role);
    if (filter.state) params.set('state', filter.state);
    if (filter.instance) params.set('instance', filter.instance);
    const query = params.toString();
    return this.request<{ tasks: HumanTask[] }>(
      'GET',
      '/tasks' + (query ? `?${query}` : ''),
    ).then((r) => r.tasks);
  }

  claimTask(taskId: string, token: string): Promise<HumanTask> {
    return this.request('POST', `/tasks/${taskId}/claim`, {}, token);
  }

  completeTask(taskId: string, outcome: string, token: string): Promise<InstanceSnapshot> {
    return this.request('POST', `/tasks/${taskId}/complete`, { outcome }, token);
  }
}
