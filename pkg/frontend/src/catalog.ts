// Catalog view logic: group services under taxonomy roots and mark entries
// the current session cannot reach yet as locked (shown, not hidden).

import type { AuthLevel, ServiceDescriptor, TaxonomyNode } from './types.js';

const LEVEL_RANK: Record<AuthLevel, number> = { none: 0, weak: 1, strong: 2 };

export function levelRank(level: AuthLevel): number {
  return LEVEL_RANK[level];
}

export interface CatalogEntry {
  descriptor: ServiceDescriptor;
  locked: boolean;
}

export interface CatalogGroup {
  root: TaxonomyNode;
  entries: CatalogEntry[];
}

function rootOf(nodeId: string, parents: Map<string, string | null>): string {
  let current = nodeId;
  for (;;) {
    const parent = parents.get(current);
    if (parent === null || parent === undefined) return current;
    current = parent;
  }
}

export function groupByLifeEvent(
  nodes: TaxonomyNode[],
  services: ServiceDescriptor[],
  sessionLevel: AuthLevel,
): CatalogGroup[] {
  const parents = new Map<string, string | null>(nodes.map((n) => [n.node_id, n.parent]));
  const byId = new Map(nodes.map((n) => [n.node_id, n]));
  const groups = new Map<string, CatalogGroup>();
  for (const node of nodes) {
    if (node.parent === null) groups.set(node.node_id, { root: node, entries: [] });
  }
  for (const descriptor of services) {
    const roots = new Set(
      descriptor.life_events
        .filter((id) => byId.has(id))
        .map((id) => rootOf(id, parents)),
    );
    const locked = levelRank(descriptor.min_auth_level) > levelRank(sessionLevel);
    for (const rootId of roots) {
      const group = groups.get(rootId);
      if (group) group.entries.push({ descriptor, locked });
    }
  }
  const out = [...groups.values()].filter((g) => g.entries.length > 0);
  out.sort((a, b) => a.root.node_id.localeCompare(b.root.node_id));
  for (const group of out) {
    group.entries.sort((a, b) => a.descriptor.service_id.localeCompare(b.descriptor.service_id));
  }
  return out;
}
