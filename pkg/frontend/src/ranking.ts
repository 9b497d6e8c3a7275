/** Slot-based ranking board.
 *
 * The user drags (or clicks) candidates into k ordered slots, best first.
 * Invariants: a candidate occupies at most one slot, so a submitted order
 * can never contain duplicates; the order is only readable once every slot
 * is filled.
 */

export class RankingBoard {
  private slots: (number | null)[];

  constructor(readonly nCandidates: number, readonly k: number) {
    if (k < 1 || k > nCandidates) throw new Error(`bad board: k=${k}, n=${nCandidates}`);
    this.slots = new Array(k).fill(null);
  }

  slotContents(): (number | null)[] {
    return [...this.slots];
  }

  /** Candidates not currently placed in any slot. */
  pool(): number[] {
    const used = new Set(this.slots.filter((s) => s !== null));
    const out: number[] = [];
    for (let i = 0; i < this.nCandidates; i++) if (!used.has(i)) out.push(i);
    return out;
  }

  slotOf(candidate: number): number | null {
    const at = this.slots.indexOf(candidate);
    return at === -1 ? null : at;
  }

  firstFreeSlot(): number | null {
    const at = this.slots.indexOf(null);
    return at === -1 ? null : at;
  }

  /** Place a candidate into a slot; displaced occupants return to the pool,
   * and a candidate already on the board moves rather than duplicates. */
  assign(candidate: number, slot: number): void {
    this.checkCandidate(candidate);
    this.checkSlot(slot);
    const current = this.slots.indexOf(candidate);
    if (current !== -1) this.slots[current] = null;
    this.slots[slot] = candidate;
  }

  /** Click-to-place convenience: next free slot, if any. */
  assignNext(candidate: number): boolean {
    const free = this.firstFreeSlot();
    if (free === null) return false;
    this.assign(candidate, free);
    return true;
  }

  remove(slot: number): void {
    this.checkSlot(slot);
    this.slots[slot] = null;
  }

  /** Move a slot's occupant to another slot, shifting the displaced one. */
  move(from: number, to: number): void {
    this.checkSlot(from);
    this.checkSlot(to);
    const [occupant] = this.slots.splice(from, 1);
    this.slots.splice(to, 0, occupant);
  }

  clear(): void {
    this.slots.fill(null);
  }

  isComplete(): boolean {
    return this.slots.every((s) => s !== null);
  }

  order(): number[] {
    if (!this.isComplete()) throw new Error("ranking incomplete");
    return this.slots.map((s) => s as number);
  }

  private checkCandidate(candidate: number): void {
    if (!Number.isInteger(candidate) || candidate < 0 || candidate >= this.nCandidates) {
      throw new Error(`candidate ${candidate} outside [0, ${this.nCandidates})`);
    }
  }

  private checkSlot(slot: number): void {
    if (!Number.isInteger(slot) || slot < 0 || slot >= this.k) {
      throw new Error(`slot ${slot} outside [0, ${this.k})`);
    }
  }
}
