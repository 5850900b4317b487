//! Lowering of padding and max-pooling layers to pad/pool instructions.
//!
//! A pad/pool instruction reads one 16-value tile, computes up to four maxima
//! over masked subsets of it, and overwrites selected values of one output
//! tile with those maxima; the rest keep their previous contents. Output
//! tensors start zeroed, so padding borders need no instruction.
//!
//! An output whose window lies inside a single input tile is produced
//! directly from that tile. A window that straddles tiles is first gathered
//! into a scratch tile with single-value moves, then reduced from there.

use serde::{Deserialize, Serialize};

use crate::layout::{tile_index, TILE_DIM, TILE_LEN};

pub const MAX_UNITS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TileRef {
    /// Tile (tx, ty) of the layer's input feature map.
    Input { tx: u32, ty: u32 },
    /// Tile (tx, ty) of the layer's output feature map.
    Output { tx: u32, ty: u32 },
    /// Scratch tile private to the pad/pool unit.
    Scratch(u32),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Selector {
    #[default]
    Keep,
    Max(u8),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadPoolInstr {
    pub src: TileRef,
    pub dst: TileRef,
    /// Bit `i` of mask `k` selects input value `i` for MAX unit `k`.
    pub masks: [u16; MAX_UNITS],
    pub selectors: [Selector; TILE_LEN],
}

impl PadPoolInstr {
    fn new(src: TileRef, dst: TileRef) -> Self {
        PadPoolInstr {
            src,
            dst,
            masks: [0; MAX_UNITS],
            selectors: [Selector::Keep; TILE_LEN],
        }
    }

    /// True when every referenced MAX unit has a nonempty mask.
    pub fn is_well_formed(&self) -> bool {
        self.selectors.iter().all(|s| match s {
            Selector::Keep => true,
            Selector::Max(k) => (*k as usize) < MAX_UNITS && self.masks[*k as usize] != 0,
        })
    }

    pub fn written(&self) -> usize {
        self.selectors.iter().filter(|s| **s != Selector::Keep).count()
    }
}

/// Instruction sequence producing one output tile.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileProgram {
    pub out_tx: u32,
    pub out_ty: u32,
    pub instrs: Vec<PadPoolInstr>,
}

/// Instructions for a whole pad/pool layer, applied identically to every
/// channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadPoolLowering {
    pub out_height: usize,
    pub out_width: usize,
    pub tiles: Vec<TileProgram>,
    pub scratch_tiles: usize,
}

impl PadPoolLowering {
    pub fn instr_count(&self) -> usize {
        self.tiles.iter().map(|t| t.instrs.len()).sum()
    }
}

/// Inclusive-exclusive rectangle of input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Window {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
}

impl Window {
    fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y0 + self.h).flat_map(move |y| (self.x0..self.x0 + self.w).map(move |x| (y, x)))
    }

    fn single_tile(&self) -> Option<(usize, usize)> {
        let (ty, tx) = (self.y0 / TILE_DIM, self.x0 / TILE_DIM);
        let ty1 = (self.y0 + self.h - 1) / TILE_DIM;
        let tx1 = (self.x0 + self.w - 1) / TILE_DIM;
        (ty == ty1 && tx == tx1).then_some((tx, ty))
    }

    fn size(&self) -> usize {
        self.h * self.w
    }
}

fn intra(y: usize, x: usize) -> usize {
    tile_index(y % TILE_DIM, x % TILE_DIM)
}

/// Lowers zero padding of `border` pixels on an input of `h` x `w`.
pub fn lower_pad(h: usize, w: usize, border: usize) -> PadPoolLowering {
    let (oh, ow) = (h + 2 * border, w + 2 * border);
    lower(oh, ow, |y, x| {
        (y >= border && x >= border && y - border < h && x - border < w).then(|| Window {
            y0: y - border,
            x0: x - border,
            h: 1,
            w: 1,
        })
    })
}

/// Lowers max-pooling with the given window and stride.
pub fn lower_maxpool(h: usize, w: usize, window: (usize, usize), stride: (usize, usize)) -> PadPoolLowering {
    let (wh, ww) = window;
    let (sh, sw) = stride;
    assert!(wh <= TILE_DIM && ww <= TILE_DIM && h >= wh && w >= ww && sh > 0 && sw > 0);
    let (oh, ow) = ((h - wh) / sh + 1, (w - ww) / sw + 1);
    lower(oh, ow, |y, x| {
        Some(Window {
            y0: y * sh,
            x0: x * sw,
            h: wh,
            w: ww,
        })
    })
}

fn lower(oh: usize, ow: usize, source: impl Fn(usize, usize) -> Option<Window>) -> PadPoolLowering {
    let mut tiles = Vec::new();
    let mut scratch_tiles = 0;
    for oty in 0..oh.div_ceil(TILE_DIM) {
        for otx in 0..ow.div_ceil(TILE_DIM) {
            let dst = TileRef::Output {
                tx: otx as u32,
                ty: oty as u32,
            };
            // (input tile) -> [(output slot, mask)] for directly computable outputs
            let mut direct: Vec<((usize, usize), Vec<(usize, u16)>)> = Vec::new();
            let mut gathered: Vec<(usize, Window)> = Vec::new();
            for r in 0..TILE_DIM {
                for q in 0..TILE_DIM {
                    let (y, x) = (oty * TILE_DIM + r, otx * TILE_DIM + q);
                    if y >= oh || x >= ow {
                        continue;
                    }
                    let Some(win) = source(y, x) else { continue };
                    let slot = tile_index(r, q);
                    match win.single_tile() {
                        Some(t) => {
                            let mask = win.pixels().fold(0u16, |m, (py, px)| m | 1 << intra(py, px));
                            match direct.iter_mut().find(|(k, _)| *k == t) {
                                Some((_, v)) => v.push((slot, mask)),
                                None => direct.push((t, vec![(slot, mask)])),
                            }
                        }
                        None => gathered.push((slot, win)),
                    }
                }
            }
            direct.sort_by_key(|((tx, ty), _)| (*ty, *tx));
            let mut instrs = Vec::new();
            for ((tx, ty), outs) in direct {
                let src = TileRef::Input {
                    tx: tx as u32,
                    ty: ty as u32,
                };
                emit_reductions(&mut instrs, src, dst, &outs);
            }
            let used = emit_gathers(&mut instrs, dst, &gathered);
            scratch_tiles = scratch_tiles.max(used);
            tiles.push(TileProgram {
                out_tx: otx as u32,
                out_ty: oty as u32,
                instrs,
            });
        }
    }
    PadPoolLowering {
        out_height: oh,
        out_width: ow,
        tiles,
        scratch_tiles,
    }
}

/// Emits instructions writing `outs` (slot, mask) from one source tile,
/// sharing a MAX unit between outputs with the same mask.
fn emit_reductions(instrs: &mut Vec<PadPoolInstr>, src: TileRef, dst: TileRef, outs: &[(usize, u16)]) {
    let mut cur = PadPoolInstr::new(src, dst);
    let mut units = 0;
    for &(slot, mask) in outs {
        let unit = match cur.masks[..units].iter().position(|&m| m == mask) {
            Some(u) => u,
            None => {
                if units == MAX_UNITS {
                    instrs.push(std::mem::replace(&mut cur, PadPoolInstr::new(src, dst)));
                    units = 0;
                }
                cur.masks[units] = mask;
                units += 1;
                units - 1
            }
        };
        cur.selectors[slot] = Selector::Max(unit as u8);
    }
    if units > 0 {
        instrs.push(cur);
    }
}

/// Gathers straddling windows into scratch tiles and reduces them. Returns
/// the number of scratch tiles used.
fn emit_gathers(instrs: &mut Vec<PadPoolInstr>, dst: TileRef, gathered: &[(usize, Window)]) -> usize {
    // pack up to four windows per scratch tile, at most 16 values
    let mut packs: Vec<Vec<(usize, Window)>> = Vec::new();
    for &(slot, win) in gathered {
        let fits = packs.last().is_some_and(|p| {
            p.len() < MAX_UNITS && p.iter().map(|(_, w)| w.size()).sum::<usize>() + win.size() <= TILE_LEN
        });
        if !fits {
            packs.push(Vec::new());
        }
        packs.last_mut().unwrap().push((slot, win));
    }
    for (id, pack) in packs.iter().enumerate() {
        let scratch = TileRef::Scratch(id as u32);
        // (input tile) -> [(input value index, scratch slot)]
        let mut moves: Vec<((usize, usize), Vec<(usize, usize)>)> = Vec::new();
        let mut reductions = Vec::new();
        let mut next_slot = 0;
        for &(out_slot, win) in pack {
            let mut mask = 0u16;
            for (py, px) in win.pixels() {
                let t = (px / TILE_DIM, py / TILE_DIM);
                let mv = (intra(py, px), next_slot);
                match moves.iter_mut().find(|(k, _)| *k == t) {
                    Some((_, v)) => v.push(mv),
                    None => moves.push((t, vec![mv])),
                }
                mask |= 1 << next_slot;
                next_slot += 1;
            }
            reductions.push((out_slot, mask));
        }
        moves.sort_by_key(|((tx, ty), _)| (*ty, *tx));
        for ((tx, ty), mv) in moves {
            let src = TileRef::Input {
                tx: tx as u32,
                ty: ty as u32,
            };
            for chunk in mv.chunks(MAX_UNITS) {
                let mut ins = PadPoolInstr::new(src, scratch);
                for (u, &(value, slot)) in chunk.iter().enumerate() {
                    ins.masks[u] = 1 << value;
                    ins.selectors[slot] = Selector::Max(u as u8);
                }
                instrs.push(ins);
            }
        }
        emit_reductions(instrs, scratch, dst, &reductions);
    }
    packs.len()
}
