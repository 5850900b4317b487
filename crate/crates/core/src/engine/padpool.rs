//! Functional pad/pool unit.

use crate::driver::{LayerCode, PadPoolCode, PadPoolInstr, Selector, TileRef};
use crate::layout::{Tile, TiledTensor, TILE_LEN};
use crate::netmodel::Shape;
use crate::numerics::QVal;

use super::EngineError;

/// Pad/pool units working on different channels in parallel.
pub const PADPOOL_UNITS: usize = 4;

/// Applies one instruction to `dst` given the source tile values.
pub fn exec_padpool(instr: &PadPoolInstr, src: &Tile, dst: &mut Tile) -> Result<(), String> {
    let mut maxima = [None::<QVal>; 4];
    for (k, m) in instr.masks.iter().enumerate() {
        maxima[k] = (0..TILE_LEN).filter(|i| m >> i & 1 == 1).map(|i| src.0[i]).max();
    }
    for (slot, sel) in instr.selectors.iter().enumerate() {
        if let Selector::Max(k) = sel {
            let v = maxima
                .get(*k as usize)
                .copied()
                .flatten()
                .ok_or_else(|| format!("selector {slot} references empty mask {k}"))?;
            dst.0[slot] = v;
        }
    }
    Ok(())
}

pub fn exec_padpool_layer(l: &LayerCode, code: &PadPoolCode, ifm: &TiledTensor) -> Result<TiledTensor, EngineError> {
    let Shape::Spatial { channels, .. } = l.output else {
        return Err(EngineError::Config(format!("layer {} output is not spatial", l.name)));
    };
    let low = &code.lowering;
    let mut ofm = TiledTensor::zeros(channels, low.out_height, low.out_width);
    let mut scratch = vec![Tile::ZERO; low.scratch_tiles];
    for (inst, tiles) in code.instance_tiles.iter().enumerate() {
        for &ti in tiles {
            let tp = &low.tiles[ti as usize];
            for c in 0..channels {
                for (n, ins) in tp.instrs.iter().enumerate() {
                    let fault = |msg: String| EngineError::Fault {
                        layer: l.name.clone(),
                        instr: format!(
                            "instance {inst} PADPOOL output tile ({},{}) #{n} channel {c}",
                            tp.out_tx, tp.out_ty
                        ),
                        msg,
                    };
                    let src = match ins.src {
                        TileRef::Input { tx, ty } => ifm.tile(c, tx as usize, ty as usize),
                        TileRef::Output { tx, ty } => ofm.tile(c, tx as usize, ty as usize),
                        TileRef::Scratch(s) => *scratch
                            .get(s as usize)
                            .ok_or_else(|| fault(format!("scratch tile {s} out of range")))?,
                    };
                    let dst = match ins.dst {
                        TileRef::Output { tx, ty } => ofm
                            .tile_mut(c, tx as usize, ty as usize)
                            .map_err(|e| fault(e.to_string()))?,
                        TileRef::Scratch(s) => scratch
                            .get_mut(s as usize)
                            .ok_or_else(|| fault(format!("scratch tile {s} out of range")))?,
                        TileRef::Input { .. } => return Err(fault("input tiles are read-only".into())),
                    };
                    exec_padpool(ins, &src, dst).map_err(fault)?;
                }
            }
        }
    }
    Ok(ofm)
}
