// Wire types mirroring the gateway's JSON responses.

export type AuthLevel = 'none' | 'weak' | 'strong';

export interface TaxonomyNode {
  node_id: string;
  label: string;
  parent: string | null;
}

export interface ServiceBinding {
  kind: 'sync_port' | 'event_topic' | 'process';
  admin_id?: string;
  service_id?: string;
  topic?: string;
  model_id?: string;
}

export interface ServiceDescriptor {
  service_id: string;
  provider_admin_id: string;
  title: string;
  description: string;
  life_events: string[];
  usage_target: 'citizen' | 'business' | 'administration';
  min_auth_level: AuthLevel;
  binding: ServiceBinding;
}

export interface TransitionRecord {
  idx: number;
  step: string;
  kind: string;
  disposition: string;
  ts: string;
  detail?: string;
  external?: string;
}

export interface InstanceSnapshot {
  instance_id: string;
  model_id: string;
  version: number;
  correlation_id: string;
  status: 'running' | 'waiting_event' | 'waiting_task' | 'completed' | 'faulted';
  variables: Record<string, string>;
  frontier: string[];
  history: TransitionRecord[];
}

export interface HumanTask {
  task_id: string;
  instance_id: string;
  step: string;
  role: string;
  prompt: string;
  state: 'open' | 'claimed' | 'completed';
  claimant: string | null;
  lease_expiry: string | null;
  outcome: string | null;
  created_at: string;
}

export interface LoginResponse {
  token: string;
  user_id: string;
  level: 'weak' | 'strong';
}

export interface Profile {
  user_id: string;
  level: string;
  roles: string[];
  static_profile: Record<string, string>;
  dynamic_preferences: Record<string, string>;
}

export interface InvokeResult {
  binding: string;
  instance_id?: string;
  correlation_id: string;
  status?: string;
  response?: unknown;
  receipt?: unknown;
}

export interface PortalConfig {
  gatewayBaseUrl: string;
}
