//! T-table AES-128 victim and the last-round counting attack.
//!
//! Tables follow the classic encrypt-direction layout: `Te0[x]` holds the
//! big-endian word `(2·S[x], S[x], S[x], 3·S[x])` and `Te1..Te3` are its byte
//! rotations. Nine full rounds use all four tables. The last round reuses the
//! same family, masking one byte out of each lookup; output byte `p` comes
//! from table `LAST_ROUND_TABLE[p % 4]`, and every table yields `S[x]` in the
//! masked position. One encryption performs 160 lookups, 40 per table.
//!
//! Each table is 1 KiB, so with 64-byte alignment line `l` of a table holds
//! entries `16·l .. 16·l + 16`.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::addr::LINE_SIZE;
use crate::sched::{Agent, Channel, Event, PerfCounters, Response};

pub const LOOKUPS_PER_BLOCK: usize = 160;
pub const ENTRIES_PER_LINE: usize = LINE_SIZE as usize / 4;
pub const LINES_PER_TABLE: usize = 256 / ENTRIES_PER_LINE;
/// Table feeding each output byte position (mod 4) in the last round.
pub const LAST_ROUND_TABLE: [usize; 4] = [2, 3, 0, 1];

pub const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

const RCON: [u8; 10] = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1b, 0x36];

fn xtime(b: u8) -> u8 {
    (b << 1) ^ if b & 0x80 != 0 { 0x1b } else { 0 }
}

/// The four encryption T-tables, built from the S-box on first use.
pub fn te_tables() -> &'static [[u32; 256]; 4] {
    static TABLES: OnceLock<[[u32; 256]; 4]> = OnceLock::new();
    TABLES.get_or_init(|| {
        let mut t = [[0u32; 256]; 4];
        for x in 0..256 {
            let s = SBOX[x];
            let w = u32::from_be_bytes([xtime(s), s, s, xtime(s) ^ s]);
            for (r, table) in t.iter_mut().enumerate() {
                table[x] = w.rotate_right(8 * r as u32);
            }
        }
        t
    })
}

fn sub_word(w: u32) -> u32 {
    let b = w.to_be_bytes();
    u32::from_be_bytes([
        SBOX[b[0] as usize],
        SBOX[b[1] as usize],
        SBOX[b[2] as usize],
        SBOX[b[3] as usize],
    ])
}

/// AES-128 key schedule as 44 big-endian words.
pub fn expand_key(key: &[u8; 16]) -> [u32; 44] {
    let mut w = [0u32; 44];
    for i in 0..4 {
        w[i] = u32::from_be_bytes([key[4 * i], key[4 * i + 1], key[4 * i + 2], key[4 * i + 3]]);
    }
    for i in 4..44 {
        let mut t = w[i - 1];
        if i % 4 == 0 {
            t = sub_word(t.rotate_left(8)) ^ ((RCON[i / 4 - 1] as u32) << 24);
        }
        w[i] = w[i - 4] ^ t;
    }
    w
}

/// Run the key schedule backwards from the last round key to the cipher key.
pub fn invert_key_schedule(last_round_key: &[u8; 16]) -> [u8; 16] {
    let mut w = [0u32; 44];
    for i in 0..4 {
        let b = &last_round_key[4 * i..4 * i + 4];
        w[40 + i] = u32::from_be_bytes([b[0], b[1], b[2], b[3]]);
    }
    for i in (4..44).rev() {
        let mut t = w[i - 1];
        if i % 4 == 0 {
            t = sub_word(t.rotate_left(8)) ^ ((RCON[i / 4 - 1] as u32) << 24);
        }
        w[i - 4] = w[i] ^ t;
    }
    let mut key = [0u8; 16];
    for i in 0..4 {
        key[4 * i..4 * i + 4].copy_from_slice(&w[i].to_be_bytes());
    }
    key
}

/// Last round key (round 10) as bytes.
pub fn last_round_key(key: &[u8; 16]) -> [u8; 16] {
    let w = expand_key(key);
    let mut out = [0u8; 16];
    for i in 0..4 {
        out[4 * i..4 * i + 4].copy_from_slice(&w[40 + i].to_be_bytes());
    }
    out
}

/// One T-table lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lookup {
    pub table: u8,
    pub index: u8,
}

/// Where the four tables live in the simulated address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableLayout {
    pub bases: [u64; 4],
}

impl Default for TableLayout {
    fn default() -> Self {
        let base = 0x4000_0000u64;
        Self {
            bases: [base, base + 0x400, base + 0x800, base + 0xc00],
        }
    }
}

impl TableLayout {
    pub fn entry_address(&self, lookup: Lookup) -> u64 {
        self.bases[lookup.table as usize] + 4 * lookup.index as u64
    }

    /// Address of line `line` (0..16) of `table`.
    pub fn line_address(&self, table: usize, line: usize) -> u64 {
        self.bases[table] + (line as u64) * LINE_SIZE
    }

    pub fn line_of_lookup(lookup: Lookup) -> usize {
        lookup.index as usize / ENTRIES_PER_LINE
    }
}

#[derive(Debug, Clone)]
pub struct AesTTable {
    key: [u8; 16],
    round_keys: [u32; 44],
    pub layout: TableLayout,
}

impl AesTTable {
    pub fn new(key: [u8; 16], layout: TableLayout) -> Self {
        Self {
            key,
            round_keys: expand_key(&key),
            layout,
        }
    }

    pub fn key(&self) -> [u8; 16] {
        self.key
    }

    pub fn round_keys(&self) -> &[u32; 44] {
        &self.round_keys
    }

    pub fn encrypt(&self, plaintext: &[u8; 16]) -> [u8; 16] {
        self.encrypt_traced(plaintext, |_| {})
    }

    /// Encrypt, reporting every table lookup in program order.
    pub fn encrypt_traced(
        &self,
        plaintext: &[u8; 16],
        mut on_lookup: impl FnMut(Lookup),
    ) -> [u8; 16] {
        let te = te_tables();
        let rk = &self.round_keys;
        let mut s = [0u32; 4];
        for i in 0..4 {
            let b = &plaintext[4 * i..4 * i + 4];
            s[i] = u32::from_be_bytes([b[0], b[1], b[2], b[3]]) ^ rk[i];
        }
        let mut look = |table: usize, index: u32| -> u32 {
            let index = (index & 0xff) as u8;
            on_lookup(Lookup {
                table: table as u8,
                index,
            });
            te[table][index as usize]
        };
        for round in 1..10 {
            let mut t = [0u32; 4];
            for (i, out) in t.iter_mut().enumerate() {
                *out = look(0, s[i] >> 24)
                    ^ look(1, s[(i + 1) % 4] >> 16)
                    ^ look(2, s[(i + 2) % 4] >> 8)
                    ^ look(3, s[(i + 3) % 4])
                    ^ rk[4 * round + i];
            }
            s = t;
        }
        let mut out = [0u8; 16];
        for i in 0..4 {
            let w = (look(2, s[i] >> 24) & 0xff00_0000)
                ^ (look(3, s[(i + 1) % 4] >> 16) & 0x00ff_0000)
                ^ (look(0, s[(i + 2) % 4] >> 8) & 0x0000_ff00)
                ^ (look(1, s[(i + 3) % 4]) & 0x0000_00ff)
                ^ rk[40 + i];
            out[4 * i..4 * i + 4].copy_from_slice(&w.to_be_bytes());
        }
        out
    }

    /// Ciphertext plus the line address of every lookup, in order.
    pub fn encrypt_lines(&self, plaintext: &[u8; 16]) -> ([u8; 16], Vec<u64>) {
        let mut lines = Vec::with_capacity(LOOKUPS_PER_BLOCK);
        let ct = self.encrypt_traced(plaintext, |l| {
            lines.push(crate::addr::line_of(self.layout.entry_address(l)))
        });
        (ct, lines)
    }
}

/// Bit `table * 16 + line` of a touched-lines mask.
pub fn line_bit(table: usize, line: usize) -> u64 {
    1u64 << (table * LINES_PER_TABLE + line)
}

/// Per-encryption record kept by the victim agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptionRecord {
    pub plaintext: [u8; 16],
    pub ciphertext: [u8; 16],
    /// Cycle of the opening counter read.
    pub start: u64,
    pub misses: u64,
    pub cycles: u64,
    /// Table lines touched, as a mask of [`line_bit`].
    pub touched: u64,
}

impl EncryptionRecord {
    pub fn touched_line(&self, table: usize, line: usize) -> bool {
        self.touched & line_bit(table, line) != 0
    }
}

/// Hand-off channels for lockstep runs: wait on `go`, signal `done`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lockstep {
    pub go: Channel,
    pub done: Channel,
}

/// Agent encrypting random plaintexts, each bracketed by counter reads.
#[derive(Debug)]
pub struct AesVictim {
    core: usize,
    cipher: AesTTable,
    rng: ChaCha8Rng,
    remaining: u64,
    lockstep: Option<Lockstep>,
    pending: VecDeque<Event>,
    open: Option<PerfCounters>,
    current: Option<([u8; 16], [u8; 16], u64)>,
    pub records: Vec<EncryptionRecord>,
}

impl AesVictim {
    pub fn new(core: usize, cipher: AesTTable, encryptions: u64, seed: u64) -> Self {
        Self {
            core,
            cipher,
            rng: ChaCha8Rng::seed_from_u64(seed),
            remaining: encryptions,
            lockstep: None,
            pending: VecDeque::new(),
            open: None,
            current: None,
            records: Vec::with_capacity(encryptions as usize),
        }
    }

    pub fn with_lockstep(mut self, lockstep: Lockstep) -> Self {
        self.lockstep = Some(lockstep);
        self
    }

    pub fn cipher(&self) -> &AesTTable {
        &self.cipher
    }

    fn on_counters(&mut self, c: PerfCounters) {
        match self.open.take() {
            None => self.open = Some(c),
            Some(start) => {
                let d = c.delta(&start);
                let (plaintext, ciphertext, touched) = self
                    .current
                    .take()
                    .expect("closing bracket without an encryption");
                self.records.push(EncryptionRecord {
                    plaintext,
                    ciphertext,
                    start: start.cycles,
                    misses: d.llc_misses,
                    cycles: d.cycles,
                    touched,
                });
            }
        }
    }

    fn plan(&mut self) {
        let mut pt = [0u8; 16];
        self.rng.fill(&mut pt);
        let mut touched = 0u64;
        let mut reads = Vec::with_capacity(LOOKUPS_PER_BLOCK);
        let layout = self.cipher.layout;
        let ct = self.cipher.encrypt_traced(&pt, |l| {
            touched |= line_bit(l.table as usize, TableLayout::line_of_lookup(l));
            reads.push(Event::Read(crate::addr::line_of(layout.entry_address(l))));
        });
        self.current = Some((pt, ct, touched));
        if let Some(ls) = self.lockstep {
            self.pending.push_back(Event::WaitFor(ls.go));
        }
        self.pending.push_back(Event::CounterRead);
        self.pending.extend(reads);
        self.pending.push_back(Event::CounterRead);
        if let Some(ls) = self.lockstep {
            self.pending.push_back(Event::Signal(ls.done));
        }
        self.remaining -= 1;
    }
}

impl Agent for AesVictim {
    fn core(&self) -> usize {
        self.core
    }

    fn next(&mut self, _now: u64, last: &Response) -> Option<Event> {
        if let Response::Counters(c) = *last {
            self.on_counters(c);
        }
        if self.pending.is_empty() {
            if self.remaining == 0 {
                return None;
            }
            self.plan();
        }
        self.pending.pop_front()
    }
}

/// One monitored table line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitoredLine {
    pub table: usize,
    pub line: usize,
}

impl MonitoredLine {
    /// Output byte positions whose last-round lookup goes to this table.
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..16).filter(move |p| LAST_ROUND_TABLE[p % 4] == self.table)
    }

    /// S-box outputs stored in this line, i.e. the byte the last round
    /// extracts from each of its entries.
    pub fn values(&self) -> impl Iterator<Item = u8> + '_ {
        (0..ENTRIES_PER_LINE).map(move |j| SBOX[self.line * ENTRIES_PER_LINE + j])
    }
}

/// Line 0 of each table: enough to cover all 16 key bytes.
pub fn one_line_per_table() -> Vec<MonitoredLine> {
    (0..4)
        .map(|table| MonitoredLine { table, line: 0 })
        .collect()
}

/// Weight of an observation that rules a candidate out.
///
/// When the monitored line was not touched, no last-round lookup hit it, so
/// every key byte that would have mapped the ciphertext into the line is
/// impossible. One such sample outweighs the accumulated accessed counts of
/// roughly this many samples.
pub const ABSENT_WEIGHT: i64 = ENTRIES_PER_LINE as i64;

/// Best guess for one byte of the last round key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ByteEstimate {
    pub position: usize,
    /// `None` when no monitored line covers the position or the top score is tied.
    pub best: Option<u8>,
    pub margin: i64,
}

/// Score tables of the counting attack.
///
/// For every sample and monitored line, each entry value `t` in the line and
/// each ciphertext position `p` served by its table name the key candidate
/// `c[p] ^ t`. Accessed samples count toward `accessed`, the others toward
/// `absent`; both only grow.
#[derive(Debug, Clone)]
pub struct KeyRecoveryState {
    lines: Vec<MonitoredLine>,
    pub accessed: Vec<[u64; 256]>,
    pub absent: Vec<[u64; 256]>,
    pub samples: u64,
}

impl KeyRecoveryState {
    pub fn new(lines: Vec<MonitoredLine>) -> Self {
        Self {
            lines,
            accessed: vec![[0; 256]; 16],
            absent: vec![[0; 256]; 16],
            samples: 0,
        }
    }

    pub fn lines(&self) -> &[MonitoredLine] {
        &self.lines
    }

    /// Fold in one encryption: `accessed[i]` is the verdict for `lines[i]`.
    pub fn observe(&mut self, ciphertext: &[u8; 16], accessed: &[bool]) {
        assert_eq!(
            accessed.len(),
            self.lines.len(),
            "one verdict per monitored line"
        );
        for (line, &hit) in self.lines.iter().zip(accessed) {
            let table = if hit {
                &mut self.accessed
            } else {
                &mut self.absent
            };
            for p in line.positions() {
                for t in line.values() {
                    table[p][(ciphertext[p] ^ t) as usize] += 1;
                }
            }
        }
        self.samples += 1;
    }

    pub fn score(&self, position: usize, candidate: u8) -> i64 {
        let c = candidate as usize;
        self.accessed[position][c] as i64 - ABSENT_WEIGHT * self.absent[position][c] as i64
    }

    fn covered(&self, position: usize) -> bool {
        self.lines
            .iter()
            .any(|l| LAST_ROUND_TABLE[position % 4] == l.table)
    }

    pub fn estimate(&self, position: usize) -> ByteEstimate {
        if !self.covered(position) || self.samples == 0 {
            return ByteEstimate {
                position,
                best: None,
                margin: 0,
            };
        }
        let mut ranked: Vec<(i64, u8)> =
            (0..=255u8).map(|k| (self.score(position, k), k)).collect();
        ranked.sort_by_key(|r| std::cmp::Reverse(r.0));
        let margin = ranked[0].0 - ranked[1].0;
        ByteEstimate {
            position,
            best: (margin > 0).then_some(ranked[0].1),
            margin,
        }
    }

    pub fn estimates(&self) -> Vec<ByteEstimate> {
        (0..16).map(|p| self.estimate(p)).collect()
    }

    /// The last round key, if every byte is unambiguous.
    pub fn last_round_key(&self) -> Option<[u8; 16]> {
        let mut k = [0u8; 16];
        for e in self.estimates() {
            k[e.position] = e.best?;
        }
        Some(k)
    }

    /// The cipher key, if every byte of the last round key is unambiguous.
    pub fn recovered_key(&self) -> Option<[u8; 16]> {
        self.last_round_key().map(|k| invert_key_schedule(&k))
    }

    /// `position,candidate,accessed,absent,score` rows.
    pub fn write_scores_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["position", "candidate", "accessed", "absent", "score"])?;
        for p in 0..16 {
            for k in 0..=255u8 {
                w.write_record([
                    p.to_string(),
                    k.to_string(),
                    self.accessed[p][k as usize].to_string(),
                    self.absent[p][k as usize].to_string(),
                    self.score(p, k).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex16(s: &str) -> [u8; 16] {
        hex::decode(s).unwrap().try_into().unwrap()
    }

    #[test]
    fn fips_vector() {
        let c = AesTTable::new(
            hex16("000102030405060708090a0b0c0d0e0f"),
            TableLayout::default(),
        );
        let ct = c.encrypt(&hex16("00112233445566778899aabbccddeeff"));
        assert_eq!(hex::encode(ct), "69c4e0d86a7b0430d8cdb78070b4c55a");
    }

    #[test]
    fn lookup_counts() {
        let c = AesTTable::new([7; 16], TableLayout::default());
        let mut per_table = [0usize; 4];
        let mut all = Vec::new();
        c.encrypt_traced(&[1; 16], |l| {
            per_table[l.table as usize] += 1;
            all.push(l);
        });
        assert_eq!(all.len(), LOOKUPS_PER_BLOCK);
        assert_eq!(per_table, [40; 4]);
        // The last round is the final 16 lookups, four per table.
        let mut last = [0usize; 4];
        for l in &all[144..] {
            last[l.table as usize] += 1;
        }
        assert_eq!(last, [4; 4]);
    }

    #[test]
    fn last_round_lookups_explain_ciphertext() {
        let key = hex16("2b7e151628aed2a6abf7158809cf4f3c");
        let c = AesTTable::new(key, TableLayout::default());
        let mut all = Vec::new();
        let ct = c.encrypt_traced(&[0x5a; 16], |l| all.push(l));
        let k10 = last_round_key(&key);
        // Lookup order in the last round is word by word, byte by byte.
        for (p, l) in all[144..].iter().enumerate() {
            assert_eq!(l.table as usize, LAST_ROUND_TABLE[p % 4]);
            assert_eq!(ct[p], SBOX[l.index as usize] ^ k10[p]);
        }
    }

    #[test]
    fn key_schedule_inverts() {
        let key = hex16("2b7e151628aed2a6abf7158809cf4f3c");
        assert_eq!(
            hex::encode(last_round_key(&key)),
            "d014f9a8c9ee2589e13f0cc8b6630ca6"
        );
        assert_eq!(invert_key_schedule(&last_round_key(&key)), key);
    }

    #[test]
    fn layout_lines_hold_sixteen_entries() {
        let l = TableLayout::default();
        for t in 0..4 {
            assert_eq!(l.bases[t] % LINE_SIZE, 0);
            for idx in 0..=255u8 {
                let a = l.entry_address(Lookup {
                    table: t as u8,
                    index: idx,
                });
                assert_eq!(
                    crate::addr::line_of(a),
                    l.line_address(t, idx as usize / 16)
                );
            }
        }
    }

    #[test]
    fn recovery_from_ground_truth() {
        let key = hex16("00112233445566778899aabbccddeeff");
        let c = AesTTable::new(key, TableLayout::default());
        let lines = one_line_per_table();
        let mut st = KeyRecoveryState::new(lines.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3000 {
            let mut pt = [0u8; 16];
            rng.fill(&mut pt);
            let mut touched = 0u64;
            let ct = c.encrypt_traced(&pt, |l| {
                touched |= line_bit(l.table as usize, TableLayout::line_of_lookup(l))
            });
            let v: Vec<bool> = lines
                .iter()
                .map(|m| touched & line_bit(m.table, m.line) != 0)
                .collect();
            st.observe(&ct, &v);
        }
        assert_eq!(st.recovered_key(), Some(key));
    }

    #[test]
    fn coin_flips_do_not_recover() {
        let key = hex16("00112233445566778899aabbccddeeff");
        let c = AesTTable::new(key, TableLayout::default());
        let k10 = last_round_key(&key);
        let mut st = KeyRecoveryState::new(one_line_per_table());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3000 {
            let mut pt = [0u8; 16];
            rng.fill(&mut pt);
            let ct = c.encrypt(&pt);
            let v: Vec<bool> = (0..4).map(|_| rng.gen_bool(0.924)).collect();
            st.observe(&ct, &v);
        }
        let right = st
            .estimates()
            .iter()
            .filter(|e| e.best == Some(k10[e.position]))
            .count();
        assert!(right <= 2, "{right} bytes matched by chance");
    }

    #[test]
    fn uncovered_positions_are_ambiguous() {
        let st = KeyRecoveryState::new(vec![MonitoredLine { table: 0, line: 0 }]);
        assert!(st.estimates().iter().all(|e| e.best.is_none()));
        assert!(st.last_round_key().is_none());
    }

    #[test]
    fn victim_agent_brackets_encryptions() {
        use crate::cache::Hierarchy;
        use crate::profile::MachineProfile;
        use crate::sched::{run, RunConfig};
        let profile = MachineProfile::builtin("i5-7600K").unwrap();
        let mut h = Hierarchy::new(&profile, 1);
        let mut v = AesVictim::new(0, AesTTable::new([1; 16], TableLayout::default()), 20, 5);
        let report = run(&mut h, &mut [&mut v], &RunConfig::default()).unwrap();
        assert_eq!(v.records.len(), 20);
        let total: u64 = v.records.iter().map(|r| r.misses).sum();
        assert_eq!(total, report.agents[0].counters.llc_misses);
        // Once the tables are resident every lookup is an L1 hit.
        let warm = v.records.last().unwrap();
        assert_eq!(warm.misses, 0);
        assert_eq!(warm.cycles, LOOKUPS_PER_BLOCK as u64 * profile.latency.l1);
        for r in &v.records {
            assert_eq!(v.cipher().encrypt(&r.plaintext), r.ciphertext);
        }
    }
}
