// In-memory gateway double speaking the same wire JSON, plus a hand-cranked
// scheduler so poll intervals advance only when a test says so.

import type { FetchLike } from '../src/api.js';
import type {
  HumanTask,
  InstanceSnapshot,
  ServiceDescriptor,
  TaxonomyNode,
  TransitionRecord,
} from '../src/types.js';

export class ManualScheduler {
  private queue: Array<() => void | Promise<void>> = [];

  schedule = (fn: () => void | Promise<void>, _ms: number): void => {
    this.queue.push(fn);
  };

  get pending(): number {
    return this.queue.length;
  }

  // One poll interval elapses: run everything scheduled and wait for it
  // (real pollers do network I/O, so ticks must await completion).
  async tick(): Promise<void> {
    const due = this.queue.splice(0);
    await Promise.all(due.map((fn) => Promise.resolve(fn())));
    await new Promise((resolve) => setImmediate(resolve));
  }
}

const LEVELS: Record<string, number> = { none: 0, weak: 1, strong: 2 };

interface FakeUser {
  password: string;
  roles: string[];
  static_profile: Record<string, string>;
}

export class FakeGateway {
  users: Record<string, FakeUser> = {
    mario: { password: 'cittadino-mario-1', roles: ['citizen'], static_profile: { full_name: 'Mario Rossi' } },
    anna: {
      password: 'sportello-anna-1',
      roles: ['citizen', 'clerk:comune_nuovo'],
      static_profile: { full_name: 'Anna Bianchi' },
    },
  };

  taxonomy: TaxonomyNode[] = [
    { node_id: 'trasloco', label: 'Moving house', parent: null },
    { node_id: 'trasloco.residenza', label: 'Changing residence', parent: 'trasloco' },
    { node_id: 'impresa', label: 'Running a business', parent: null },
  ];

  services: ServiceDescriptor[] = [
    {
      service_id: 'cambio-residenza',
      provider_admin_id: 'comune_nuovo',
      title: 'Cambio di residenza',
      description: 'sportello unico',
      life_events: ['trasloco.residenza'],
      usage_target: 'citizen',
      min_auth_level: 'weak',
      binding: { kind: 'process', model_id: 'cambio_residenza' },
    },
    {
      service_id: 'firma-digitale',
      provider_admin_id: 'regione',
      title: 'Archivio atti riservati',
      description: 'richiede identità forte',
      life_events: ['impresa'],
      usage_target: 'citizen',
      min_auth_level: 'strong',
      binding: { kind: 'process', model_id: 'atti' },
    },
  ];

  tokens = new Map<string, { user: string; level: 'weak' | 'strong' }>();
  instances = new Map<string, InstanceSnapshot>();
  tasks: HumanTask[] = [];
  calls: string[] = [];
  loginCount = 0;
  private seq = 0;

  fetch: FetchLike = async (input, init) => this.route(input, init ?? {});

  private json(status: number, payload: unknown): Response {
    return new Response(JSON.stringify(payload), {
      status,
      headers: { 'Content-Type': 'application/json' },
    });
  }

  private fail(status: number, error: string, detail = ''): Response {
    return this.json(status, { error, detail });
  }

  private auth(init: RequestInit): { user: string; level: 'weak' | 'strong' } | null {
    const headers = (init.headers ?? {}) as Record<string, string>;
    const header = headers['Authorization'] ?? '';
    if (!header.startsWith('Bearer ')) return null;
    return this.tokens.get(header.slice(7)) ?? null;
  }

  private record(step: string, kind: string, disposition = 'next'): TransitionRecord {
    this.seq += 1;
    return { idx: this.seq, step, kind, disposition, ts: new Date().toISOString(), detail: '' };
  }

  // test hook: the school confirms, the instance reaches its human task
  schoolEventArrives(instanceId: string): void {
    const inst = this.instances.get(instanceId);
    if (!inst || inst.status !== 'waiting_event') throw new Error('instance is not waiting');
    inst.history.push(this.record('t030_attendi_scuola', 'wait_event'));
    inst.status = 'waiting_task';
    inst.frontier = ['t040_approvazione'];
    this.tasks.push({
      task_id: `task-${this.tasks.length + 1}`,
      instance_id: instanceId,
      step: 't040_approvazione',
      role: 'clerk:comune_nuovo',
      prompt: 'Approvare il cambio di residenza?',
      state: 'open',
      claimant: null,
      lease_expiry: null,
      outcome: null,
      created_at: new Date().toISOString(),
    });
  }

  private route(input: string, init: RequestInit): Response {
    const method = init.method ?? 'GET';
    const url = new URL(input);
    const path = url.pathname;
    this.calls.push(`${method} ${path}`);
    const body = init.body ? JSON.parse(String(init.body)) : {};

    if (method === 'POST' && path === '/auth/login') {
      const user = this.users[body.user_id as string];
      if (!user || user.password !== body.password) {
        return this.fail(401, 'BadCredential', 'wrong password');
      }
      this.loginCount += 1;
      const token = `tok-${body.user_id}-${this.loginCount}`;
      this.tokens.set(token, { user: body.user_id, level: 'weak' });
      return this.json(200, { token, user_id: body.user_id, level: 'weak' });
    }

    if (method === 'GET' && path === '/profile') {
      const who = this.auth(init);
      if (!who) return this.fail(401, 'InvalidToken', 'no bearer');
      const user = this.users[who.user]!;
      return this.json(200, {
        user_id: who.user,
        level: who.level,
        roles: user.roles,
        static_profile: user.static_profile,
        dynamic_preferences: {},
      });
    }

    if (method === 'GET' && path === '/taxonomy') return this.json(200, { nodes: this.taxonomy });

    if (method === 'GET' && path === '/services') {
      const target = url.searchParams.get('target');
      const services = this.services.filter((s) => !target || s.usage_target === target);
      return this.json(200, { services });
    }

    const invoke = path.match(/^\/services\/([^/]+)\/invoke$/);
    if (method === 'POST' && invoke) {
      const descriptor = this.services.find((s) => s.service_id === invoke[1]);
      if (!descriptor) return this.fail(404, 'UnknownService', invoke[1] ?? '');
      const who = this.auth(init);
      const level = who?.level ?? 'none';
      if (LEVELS[level]! < LEVELS[descriptor.min_auth_level]!) {
        return this.fail(403, 'AuthorizationDenied', 'authorization denied: level');
      }
      const instanceId = `inst-${this.instances.size + 1}`;
      this.instances.set(instanceId, {
        instance_id: instanceId,
        model_id: descriptor.binding.model_id ?? '',
        version: 1,
        correlation_id: (body.correlation as string) ?? instanceId,
        status: 'waiting_event',
        variables: body.inputs ?? {},
        frontier: ['t030_attendi_scuola'],
        history: [
          this.record('t010_cancella_vecchia', 'service_invoke'),
          this.record('t020_iscrivi_nuova', 'service_invoke'),
        ],
      });
      return this.json(200, {
        binding: 'process',
        instance_id: instanceId,
        correlation_id: body.correlation ?? instanceId,
        status: 'waiting_event',
      });
    }

    const instance = path.match(/^\/instances\/([^/]+)$/);
    if (method === 'GET' && instance) {
      const snapshot = this.instances.get(instance[1] ?? '');
      if (!snapshot) return this.fail(404, 'UnknownInstance', instance[1] ?? '');
      return this.json(200, snapshot);
    }

    if (method === 'GET' && path === '/tasks') {
      const role = url.searchParams.get('role');
      const state = url.searchParams.get('state');
      const tasks = this.tasks.filter(
        (t) => (!role || t.role === role) && (!state || t.state === state),
      );
      return this.json(200, { tasks });
    }

    const claim = path.match(/^\/tasks\/([^/]+)\/claim$/);
    if (method === 'POST' && claim) {
      const who = this.auth(init);
      if (!who) return this.fail(401, 'InvalidToken', 'no bearer');
      const task = this.tasks.find((t) => t.task_id === claim[1]);
      if (!task) return this.fail(404, 'UnknownTask', claim[1] ?? '');
      const roles = this.users[who.user]!.roles;
      if (!roles.includes(task.role)) return this.fail(403, 'RoleDenied', `needs ${task.role}`);
      if (task.state === 'claimed') return this.fail(409, 'AlreadyClaimed', task.claimant ?? '');
      task.state = 'claimed';
      task.claimant = who.user;
      return this.json(200, task);
    }

    const complete = path.match(/^\/tasks\/([^/]+)\/complete$/);
    if (method === 'POST' && complete) {
      const who = this.auth(init);
      if (!who) return this.fail(401, 'InvalidToken', 'no bearer');
      const task = this.tasks.find((t) => t.task_id === complete[1]);
      if (!task) return this.fail(404, 'UnknownTask', complete[1] ?? '');
      if (task.state !== 'claimed' || task.claimant !== who.user) {
        return this.fail(403, 'NotClaimant', who.user);
      }
      task.state = 'completed';
      task.outcome = body.outcome;
      const inst = this.instances.get(task.instance_id)!;
      inst.history.push(this.record('t040_approvazione', 'human_task'));
      inst.history.push(this.record('t060_fine', 'terminate', 'completed'));
      inst.status = 'completed';
      inst.frontier = [];
      return this.json(200, inst);
    }

    return this.fail(404, 'NotFound', `${method} ${path}`);
  }
}

export function baseClientUrl(): string {
  return 'http://fake-gateway.test';
}
