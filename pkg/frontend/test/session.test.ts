import test from 'node:test';
import assert from 'node:assert/strict';

import { GatewayClient, GatewayError } from '../src/api.js';
import { SessionStore } from '../src/session.js';
import { FakeGateway, baseClientUrl } from './helpers.js';

test('login stores token and cached profile', async () => {
  const gw = new FakeGateway();
  const store = new SessionStore();
  const session = await store.login(new GatewayClient(baseClientUrl(), gw.fetch), 'anna', 'sportello-anna-1');
  assert.equal(session.userId, 'anna');
  assert.equal(session.level, 'weak');
  assert.ok(session.profile?.roles.includes('clerk:comune_nuovo'));
  assert.equal(store.current, session);
});

test('no credential material survives beyond the token', async () => {
  const gw = new FakeGateway();
  const store = new SessionStore();
  await store.login(new GatewayClient(baseClientUrl(), gw.fetch), 'anna', 'sportello-anna-1');
  const blob = JSON.stringify(store.current);
  assert.ok(!blob.includes('sportello-anna-1'), 'password leaked into session state');
});

test('failed login leaves no session', async () => {
  const gw = new FakeGateway();
  const store = new SessionStore();
  await assert.rejects(store.login(new GatewayClient(baseClientUrl(), gw.fetch), 'anna', 'nope'));
  assert.equal(store.current, null);
});

test('auth failure clears the session', async () => {
  const gw = new FakeGateway();
  const store = new SessionStore();
  await store.login(new GatewayClient(baseClientUrl(), gw.fetch), 'anna', 'sportello-anna-1');
  const absorbed = store.absorbError(new GatewayError(401, 'ExpiredToken', 'token expired'));
  assert.equal(absorbed, true);
  assert.equal(store.current, null);
});

test('non-auth errors leave the session alone', async () => {
  const gw = new FakeGateway();
  const store = new SessionStore();
  await store.login(new GatewayClient(baseClientUrl(), gw.fetch), 'anna', 'sportello-anna-1');
  assert.equal(store.absorbError(new GatewayError(404, 'UnknownTask', '')), false);
  assert.notEqual(store.current, null);
});

test('change listeners fire on login and logout', async () => {
  const gw = new FakeGateway();
  const store = new SessionStore();
  const seen: Array<string | null> = [];
  store.onChange((s) => seen.push(s ? s.userId : null));
  await store.login(new GatewayClient(baseClientUrl(), gw.fetch), 'mario', 'cittadino-mario-1');
  store.logout();
  assert.deepEqual(seen, ['mario', null]);
});
