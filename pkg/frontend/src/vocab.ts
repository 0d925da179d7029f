/**
 * The committed toy vocabulary, mirrored client-side so the prompt picker
 * is a closed dropdown and invalid names never reach the wire.
 */

export const RV2V_INSTRUCTION_ID = 2;

export const STYLE_TOKENS: ReadonlyArray<{ id: number; name: string }> = [
  { id: 3, name: "sepia" },
  { id: 4, name: "negative" },
  { id: 5, name: "perm_gbr" },
  { id: 6, name: "perm_brg" },
  { id: 7, name: "gamma_warm" },
  { id: 8, name: "gamma_cool" },
  { id: 9, name: "ink" },
  { id: 10, name: "cool_shift" },
];

export function tokenId(name: string): number {
  const hit = STYLE_TOKENS.find((t) => t.name === name);
  if (!hit) throw new Error(`unknown prompt token "${name}"`);
  return hit.id;
}
