//! Functional convolution: staging units, convolution units and the
//! accumulator/writer exchanging records over bounded FIFOs.
//!
//! Per instruction, staging unit `u` reads the 8x8 block of each channel it
//! owns and queues it. Convolution unit `u` pairs each block with the
//! channel's packed weight group and accumulates four partial tiles. The
//! accumulator waits for all units (the barrier), adds the bias, and the
//! writer requantizes and stores the four OFM tiles.

use std::ops::Range;

use crate::driver::{ConvCode, ConvInstr, LayerCode, Program};
use crate::layout::{read_block_2x2, Block, Tile, TiledTensor, TILE_DIM, TILE_LEN};
use crate::numerics::{mul, requantize, Acc, QVal};
use crate::packer::{PackedLayer, GROUP_FILTERS};

use super::fifo::{run_units, Fifo, QueueOccupancy, Step};
use super::{EngineConfig, EngineError};

/// The 4x4 region of `block` anchored at the weight's intra-tile offset.
pub fn steer(offset: u8, block: &Block) -> [QVal; TILE_LEN] {
    let (i, j) = (offset as usize / TILE_DIM, offset as usize % TILE_DIM);
    let mut out = [QVal::ZERO; TILE_LEN];
    for u in 0..TILE_DIM {
        for v in 0..TILE_DIM {
            out[u * TILE_DIM + v] = block[u + i][v + j];
        }
    }
    out
}

type Partial = [[i32; TILE_LEN]; GROUP_FILTERS];

struct StageRecord {
    channel: usize,
    block: Block,
}

struct Units<'a> {
    instr: &'a ConvInstr,
    layer: &'a PackedLayer,
    ifm: &'a TiledTensor,
    channels: &'a [Vec<u32>],
    resident: Range<usize>,
    stage_q: Vec<Fifo<StageRecord>>,
    partial_q: Fifo<Partial>,
    // staging unit state
    staged: Vec<usize>,
    pending_stage: Vec<Option<StageRecord>>,
    // conv unit state
    consumed: Vec<usize>,
    partials: Vec<Partial>,
    sent: Vec<bool>,
    // accumulator state
    received: usize,
    acc: Partial,
    fault: Option<String>,
}

impl Units<'_> {
    fn staging(&mut self, u: usize) -> Step {
        if self.staged[u] == self.channels[u].len() && self.pending_stage[u].is_none() {
            return Step::Done;
        }
        let rec = match self.pending_stage[u].take() {
            Some(r) => r,
            None => {
                let c = self.channels[u][self.staged[u]] as usize;
                let (tx, ty) = (self.instr.tx as usize, self.instr.ty as usize);
                let last_row = (ty + 1).min(self.ifm.tile_rows - 1);
                if !(self.resident.contains(&ty) && self.resident.contains(&last_row)) {
                    self.fault = Some(format!(
                        "channel {c} tile rows {ty}..={last_row} not resident (resident {:?})",
                        self.resident
                    ));
                    return Step::Done;
                }
                match read_block_2x2(self.ifm, c, tx, ty) {
                    Ok(block) => {
                        self.staged[u] += 1;
                        StageRecord { channel: c, block }
                    }
                    Err(e) => {
                        self.fault = Some(e.to_string());
                        return Step::Done;
                    }
                }
            }
        };
        match self.stage_q[u].push(rec) {
            Ok(()) => Step::Progress,
            Err(rec) => {
                self.pending_stage[u] = Some(rec);
                Step::Blocked
            }
        }
    }

    fn convolve(&mut self, u: usize) -> Step {
        if self.sent[u] {
            return Step::Done;
        }
        if self.consumed[u] == self.channels[u].len() {
            return match self.partial_q.push(self.partials[u]) {
                Ok(()) => {
                    self.sent[u] = true;
                    Step::Progress
                }
                Err(_) => Step::Blocked,
            };
        }
        let Some(rec) = self.stage_q[u].pop() else {
            return Step::Blocked;
        };
        let group = self.layer.group(self.instr.filter_group as usize, rec.channel);
        for (f, tile) in group.tiles.iter().enumerate() {
            let part = &mut self.partials[u][f];
            for e in &tile.entries {
                let vals = steer(e.offset, &rec.block);
                for (p, &x) in part.iter_mut().zip(vals.iter()) {
                    *p += mul(e.weight, x);
                }
            }
        }
        self.consumed[u] += 1;
        Step::Progress
    }

    fn accumulate(&mut self) -> Step {
        if self.received == self.channels.len() {
            return Step::Done;
        }
        let Some(p) = self.partial_q.pop() else {
            return Step::Blocked;
        };
        for (a, part) in self.acc.iter_mut().zip(p.iter()) {
            for (x, y) in a.iter_mut().zip(part.iter()) {
                *x += y;
            }
        }
        self.received += 1;
        Step::Progress
    }

    fn occupancy(&self) -> Vec<QueueOccupancy> {
        let mut v: Vec<_> = self.stage_q.iter().map(Fifo::occupancy).collect();
        v.push(self.partial_q.occupancy());
        v
    }

    fn stalls(&self) -> u64 {
        self.stage_q.iter().map(|q| q.stalls).sum::<u64>() + self.partial_q.stalls
    }
}

fn instr_label(inst: usize, i: &ConvInstr) -> String {
    format!(
        "instance {inst} stripe {} CONV tile ({},{}) filter group {}",
        i.stripe, i.tx, i.ty, i.filter_group
    )
}

/// Executes one conv instruction; returns the accumulators of the four
/// filters (bias included) and the number of stalled pushes.
pub fn exec_conv(
    instr: &ConvInstr,
    layer: &PackedLayer,
    channels: &[Vec<u32>],
    ifm: &TiledTensor,
    resident: Range<usize>,
    fifo_depth: usize,
) -> Result<(Partial, u64), String> {
    let n = channels.len();
    let mut st = Units {
        instr,
        layer,
        ifm,
        channels,
        resident,
        stage_q: (0..n).map(|_| Fifo::new("stage", fifo_depth)).collect(),
        partial_q: Fifo::new("partial", fifo_depth),
        staged: vec![0; n],
        pending_stage: (0..n).map(|_| None).collect(),
        consumed: vec![0; n],
        partials: vec![[[0; TILE_LEN]; GROUP_FILTERS]; n],
        sent: vec![false; n],
        received: 0,
        acc: [[0; TILE_LEN]; GROUP_FILTERS],
        fault: None,
    };
    for (f, a) in st.acc.iter_mut().enumerate() {
        *a = [instr.bias[f]; TILE_LEN];
    }
    let result = run_units(
        &mut st,
        2 * n + 1,
        |s, k| {
            if s.fault.is_some() {
                return Step::Done;
            }
            if k < n {
                s.staging(k)
            } else if k < 2 * n {
                s.convolve(k - n)
            } else {
                s.accumulate()
            }
        },
        Units::occupancy,
    );
    if let Some(f) = st.fault {
        return Err(f);
    }
    if let Err(snap) = result {
        let s: Vec<String> = snap.iter().map(ToString::to_string).collect();
        return Err(format!("deadlock; queues: {}", s.join(" ")));
    }
    Ok((st.acc, st.stalls()))
}

/// Runs every instruction of a conv layer; returns the OFM and stall count.
pub fn exec_conv_layer(
    p: &Program,
    l: &LayerCode,
    code: &ConvCode,
    layer: &PackedLayer,
    cfg: &EngineConfig,
    ifm: &TiledTensor,
) -> Result<(TiledTensor, u64), EngineError> {
    let ls = &code.stripes;
    let mut ofm = TiledTensor::zeros(code.spec.out_channels, ls.out_height, ls.out_width);
    let mut stalls = 0;
    for (inst, stream) in code.streams.iter().enumerate() {
        for i in stream {
            let fault = |msg: String| EngineError::Fault {
                layer: l.name.clone(),
                instr: instr_label(inst, i),
                msg,
            };
            if i.filter_group as usize >= layer.filter_groups {
                return Err(fault("missing weight stream for filter group".into()));
            }
            let resident = p
                .resident_rows(l.layer_index, i.stripe as usize, inst)
                .ok_or_else(|| fault("stripe has no input transfer".into()))?;
            let (acc, s) = exec_conv(i, layer, &code.unit_channels, ifm, resident, cfg.fifo_depth).map_err(|m| {
                if m.starts_with("deadlock") {
                    EngineError::Deadlock {
                        layer: l.name.clone(),
                        instr: instr_label(inst, i),
                        snapshot: m,
                    }
                } else {
                    fault(m)
                }
            })?;
            stalls += s;
            write_group(&mut ofm, code, i, &acc);
        }
    }
    Ok((ofm, stalls))
}

/// Writer: requantizes the four accumulator tiles; pixels past the logical
/// OFM edge are stored as zero.
fn write_group(ofm: &mut TiledTensor, code: &ConvCode, i: &ConvInstr, acc: &Partial) {
    let ls = &code.stripes;
    let (tx, ty) = (i.tx as usize, i.ty as usize);
    let (rows, cols) = (ls.valid_rows(ty), ls.valid_cols(tx));
    for (f, a) in acc.iter().enumerate() {
        let o = i.filter_group as usize * GROUP_FILTERS + f;
        if o >= code.spec.out_channels {
            continue;
        }
        let mut tile = Tile::ZERO;
        for r in 0..rows {
            for q in 0..cols {
                tile.set(r, q, requantize(Acc(a[r * TILE_DIM + q]), &code.spec.quant));
            }
        }
        *ofm.tile_mut(o, tx, ty).expect("ofm tile in grid") = tile;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packer::{pack_conv_layer, STAGING_UNITS};

    fn labelled_block() -> Block {
        // value at (r, c) encodes 8r + c, saturating at 127
        let mut b = [[QVal::ZERO; 8]; 8];
        for (r, row) in b.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = QVal::from_i32((8 * r + c) as i32);
            }
        }
        b
    }

    #[test]
    fn steer_offset_zero_is_tile_a() {
        let b = labelled_block();
        let s = steer(0, &b);
        let want: Vec<i32> = (0..4).flat_map(|r| (0..4).map(move |c| 8 * r + c)).collect();
        assert_eq!(s.map(QVal::to_i32).to_vec(), want);
    }

    #[test]
    fn steer_offset_five_spans_four_tiles() {
        // tiles A | B over D-row; A_5 is (1,1), B_4 is (1,4), D_0 is (4,4)
        let b = labelled_block();
        let s = steer(5, &b).map(QVal::to_i32);
        assert_eq!(&s[..4], &[9, 10, 11, 12]);
        assert_eq!(s[15], 8 * 4 + 4);
    }

    #[test]
    fn steer_offset_fifteen_bottom_right() {
        let b = labelled_block();
        let s = steer(15, &b).map(QVal::to_i32);
        let want: Vec<i32> = (3..7).flat_map(|r| (3..7).map(move |c| 8 * r + c)).collect();
        assert_eq!(s.to_vec(), want);
    }

    fn instr(fg: u32) -> ConvInstr {
        ConvInstr {
            layer: 0,
            stripe: 0,
            tx: 0,
            ty: 0,
            filter_group: fg,
            bias: [0; 4],
            recompute: false,
        }
    }

    #[test]
    fn delta_kernel_copies_tile() {
        let mut ifm = TiledTensor::zeros(1, 4, 4);
        for r in 0..4 {
            for c in 0..4 {
                ifm.tile_mut(0, 0, 0).unwrap().set(r, c, QVal::from_i32((r * 4 + c) as i32 - 7));
            }
        }
        let layer = pack_conv_layer(0, 1, 1, 1, &[QVal::from_i32(1)]);
        let chans = crate::layout::round_robin_channels(1, STAGING_UNITS)
            .into_iter()
            .map(|v| v.into_iter().map(|c| c as u32).collect())
            .collect::<Vec<Vec<u32>>>();
        let (acc, _) = exec_conv(&instr(0), &layer, &chans, &ifm, 0..1, 4).unwrap();
        let want: Vec<i32> = (0..16).map(|v| v - 7).collect();
        assert_eq!(acc[0].to_vec(), want);
        assert_eq!(acc[1], [0; 16]);
    }

    #[test]
    fn non_resident_tile_faults() {
        let ifm = TiledTensor::zeros(1, 8, 8);
        let layer = pack_conv_layer(0, 1, 1, 1, &[QVal::from_i32(1)]);
        let chans = vec![vec![0u32], vec![], vec![], vec![]];
        let mut i = instr(0);
        i.ty = 1;
        let err = exec_conv(&i, &layer, &chans, &ifm, 0..1, 4).unwrap_err();
        assert!(err.contains("not resident"), "{err}");
    }

    #[test]
    fn depth_one_queues_still_complete() {
        let ifm = TiledTensor::zeros(8, 8, 8);
        let w = vec![QVal::from_i32(2); 8 * 4 * 9];
        let layer = pack_conv_layer(0, 8, 4, 3, &w);
        let chans: Vec<Vec<u32>> = crate::layout::round_robin_channels(8, STAGING_UNITS)
            .into_iter()
            .map(|v| v.into_iter().map(|c| c as u32).collect())
            .collect();
        let (acc, stalls) = exec_conv(&instr(0), &layer, &chans, &ifm, 0..2, 1).unwrap();
        assert_eq!(acc, [[0; 16]; 4]);
        assert!(stalls > 0);
    }
}
