// Single-page portal: catalog, login, submit & track, operator inbox.
// Served as static assets from any origin; the gateway base URL comes from
// config.json next to index.html.

import { GatewayClient, GatewayError } from './api.js';
import { groupByLifeEvent } from './catalog.js';
import { canOperate, operatorRoles, TaskInbox } from './inbox.js';
import { SessionStore } from './session.js';
import { RequestTracker } from './tracking.js';
import type { AuthLevel, PortalConfig, ServiceDescriptor } from './types.js';

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: Array<Node | string>
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) node.setAttribute(key, value);
  node.append(...children);
  return node;
}

function clear(node: HTMLElement): HTMLElement {
  node.replaceChildren();
  return node;
}

async function loadConfig(): Promise<PortalConfig> {
  const resp = await fetch('./config.json');
  if (!resp.ok) throw new Error(`config.json missing (HTTP ${resp.status})`);
  return resp.json();
}

type Area = 'catalog' | 'requests' | 'inbox';

class PortalApp {
  private readonly session = new SessionStore();
  private readonly tracker: RequestTracker;
  private readonly inbox: TaskInbox;
  private area: Area = 'catalog';
  private banner = el('div', { class: 'banner hidden' });
  private main = el('main');

  constructor(private readonly client: GatewayClient) {
    this.tracker = new RequestTracker(client);
    this.inbox = new TaskInbox(client);
  }

  mount(root: HTMLElement): void {
    const nav = el(
      'nav',
      {},
      el('h1', {}, 'Sportello unico'),
      this.navButton('catalog', 'Servizi'),
      this.navButton('requests', 'Le mie richieste'),
      this.navButton('inbox', 'Sportello operatore'),
      this.sessionBox(),
    );
    root.replaceChildren(nav, this.banner, this.main);
    this.session.onChange(() => this.render());
    this.render();
  }

  private navButton(area: Area, label: string): HTMLButtonElement {
    const button = el('button', { class: 'nav' }, label);
    button.onclick = () => {
      this.area = area;
      this.render();
    };
    return button;
  }

  private sessionBox(): HTMLElement {
    const box = el('div', { class: 'session' });
    this.session.onChange((session) => {
      clear(box);
      if (session) {
        const who = el('span', {}, `${session.userId} (${session.level})`);
        const out = el('button', {}, 'Esci');
        out.onclick = () => this.session.logout();
        box.append(who, out);
      }
    });
    return box;
  }

  private showError(message: string): void {
    this.banner.textContent = message;
    this.banner.className = 'banner error';
  }

  private clearBanner(): void {
    this.banner.className = 'banner hidden';
  }

  private render(): void {
    this.clearBanner();
    if (this.area === 'catalog') void this.renderCatalog();
    else if (this.area === 'requests') this.renderRequests();
    else void this.renderInbox();
  }

  // -- catalog ---------------------------------------------------------------

  private async renderCatalog(): Promise<void> {
    const main = clear(this.main);
    main.append(el('h2', {}, 'Servizi per evento della vita'));
    let nodes, services;
    try {
      [nodes, services] = await Promise.all([
        this.client.listTaxonomy(),
        this.client.listServices(undefined, 'citizen'),
      ]);
    } catch (err) {
      this.showError(`Gateway non raggiungibile: ${err}`);
      return;
    }
    const level: AuthLevel = this.session.current?.level ?? 'none';
    for (const group of groupByLifeEvent(nodes, services, level)) {
      const section = el('section', {}, el('h3', {}, group.root.label));
      for (const entry of group.entries) {
        section.append(this.serviceCard(entry.descriptor, entry.locked));
      }
      main.append(section);
    }
  }

  private serviceCard(descriptor: ServiceDescriptor, locked: boolean): HTMLElement {
    const card = el(
      'article',
      { class: 'card' },
      el('h4', {}, descriptor.title),
      el('p', {}, descriptor.description),
      el('p', { class: 'meta' }, `${descriptor.provider_admin_id} · livello ${descriptor.min_auth_level}`),
    );
    if (locked) {
      card.append(el('span', { class: 'locked' }, 'richiede autenticazione superiore'));
      return card;
    }
    const submit = el('button', {}, 'Avvia richiesta');
    submit.onclick = () => void this.submit(descriptor);
    card.append(submit);
    return card;
  }

  private async submit(descriptor: ServiceDescriptor): Promise<void> {
    const session = this.session.current;
    if (!session && descriptor.min_auth_level !== 'none') {
      this.area = 'requests';
      this.render();
      this.showError('Accedi per avviare la richiesta.');
      return;
    }
    const raw = window.prompt(`Dati per «${descriptor.title}» (JSON)`, '{}') ?? '{}';
    let inputs: Record<string, string>;
    try {
      inputs = JSON.parse(raw);
    } catch {
      this.showError('I dati della richiesta devono essere JSON valido.');
      return;
    }
    try {
      const result = await this.client.invokeService(
        descriptor.service_id,
        inputs,
        session?.token,
      );
      if (result.instance_id) {
        this.area = 'requests';
        this.render();
        await this.tracker.track(result.instance_id, descriptor.title, () => this.renderRequests());
      } else {
        this.showError('Richiesta sincrona completata.');
      }
    } catch (err) {
      if (err instanceof GatewayError && err.status === 403) {
        this.showError(`Accesso negato: ${err.message}`);
      } else if (!this.session.absorbError(err)) {
        this.showError(String(err));
      }
    }
  }

  // -- tracked requests --------------------------------------------------------

  private renderRequests(): void {
    if (this.area !== 'requests') return;
    const main = clear(this.main);
    main.append(el('h2', {}, 'Le mie richieste'), this.loginForm());
    for (const tracked of this.tracker.list()) {
      const item = el(
        'article',
        { class: 'card' },
        el('h4', {}, tracked.serviceTitle),
        el('p', { class: `status ${tracked.status}` }, `stato: ${tracked.status}`),
      );
      const feed = el('ol', { class: 'feed' });
      for (const record of tracked.feed) {
        feed.append(el('li', {}, `${record.ts} · ${record.step} (${record.disposition})`));
      }
      item.append(feed);
      main.append(item);
    }
    if (!this.tracker.list().length) {
      main.append(el('p', { class: 'meta' }, 'Nessuna richiesta in corso.'));
    }
  }

  private loginForm(): HTMLElement {
    if (this.session.current) return el('p', {}, `Sessione attiva: ${this.session.current.userId}`);
    const user = el('input', { placeholder: 'utente' });
    const password = el('input', { placeholder: 'password', type: 'password' });
    const go = el('button', {}, 'Accedi');
    const form = el('div', { class: 'login' }, user, password, go);
    go.onclick = async () => {
      try {
        await this.session.login(this.client, user.value, password.value);
        this.clearBanner();
      } catch (err) {
        this.showError(`Accesso non riuscito: ${err}`);
      }
    };
    return form;
  }

  // -- operator inbox ------------------------------------------------------------

  private async renderInbox(): Promise<void> {
    const main = clear(this.main);
    main.append(el('h2', {}, 'Sportello operatore'));
    const session = this.session.current;
    if (!session) {
      main.append(el('p', {}, 'Accedi dalla sezione richieste: la stessa sessione vale anche qui.'));
      return;
    }
    if (!canOperate(session.profile)) {
      main.append(el('p', {}, 'Il tuo profilo non ha ruoli di sportello.'));
      return;
    }
    for (const role of operatorRoles(session.profile)) {
      const section = el('section', {}, el('h3', {}, role));
      let tasks;
      try {
        tasks = await this.inbox.refresh(role);
      } catch (err) {
        this.showError(String(err));
        continue;
      }
      for (const task of tasks) {
        const row = el('article', { class: 'card' }, el('p', {}, task.prompt));
        const claim = el('button', {}, 'Prendi in carico');
        claim.onclick = async () => {
          const outcome = await this.inbox.claim(task.task_id, session);
          if (outcome.kind === 'already_claimed') {
            this.showError('Già presa in carico da un collega: aggiorna la lista.');
          } else if (outcome.kind === 'denied') {
            this.showError(outcome.detail);
          } else {
            const decision = window.prompt('Esito (es. approva / respinta)', 'approva') ?? 'approva';
            await this.inbox.complete(task.task_id, decision, session);
          }
          void this.renderInbox();
        };
        row.append(claim);
        section.append(row);
      }
      if (!tasks.length) section.append(el('p', { class: 'meta' }, 'Nessuna pratica in attesa.'));
      main.append(section);
    }
  }
}

async function start(): Promise<void> {
  const root = document.getElementById('app');
  if (!root) throw new Error('missing #app element');
  const config = await loadConfig();
  new PortalApp(new GatewayClient(config.gatewayBaseUrl)).mount(root);
}

void start();
