//! Pixel rendering of MiniManip states.
//!
//! Each grid cell is a 4x4 pixel tile. Markings are single black pixels on the
//! bottom row of a tile at local x = 1 (dotA) or x = 2 (dotB); both positions
//! sit on coloured pixels, so the two markings have identical mean colour over
//! any pooling window that covers the whole tile.

use super::task::{Kind, Marking};
use super::{EnvState, Object};
use crate::vision::Image;

pub const CELL_PX: u32 = 4;
pub const BACKGROUND: [u8; 3] = [32, 32, 32];
pub const MARK: [u8; 3] = [0, 0, 0];
pub const GRIPPER: [u8; 3] = [255, 255, 255];

/// Local pixels covered by an object of `kind` resting directly on the table.
pub fn shape(kind: Kind) -> Vec<(u32, u32)> {
    let mut px = Vec::with_capacity(16);
    for ly in 0..CELL_PX {
        for lx in 0..CELL_PX {
            let on = match kind {
                Kind::Block => true,
                Kind::Plate => ly >= 1,
                Kind::Bowl => ly >= 2,
                Kind::Bin => !(ly == 1 && (lx == 1 || lx == 2)),
            };
            if on {
                px.push((lx, ly));
            }
        }
    }
    px
}

pub fn marking_pixel(marking: Marking) -> (u32, u32) {
    match marking {
        Marking::DotA => (1, 3),
        Marking::DotB => (2, 3),
    }
}

fn draw_object(img: &mut Image, obj: &Object, cell: (u32, u32), lift: u32) {
    let (ox, oy) = (cell.0 * CELL_PX, cell.1 * CELL_PX);
    let mark = marking_pixel(obj.marking);
    let rgb = obj.color.rgb();
    for (lx, ly) in shape(obj.kind) {
        if ly < lift {
            continue;
        }
        let c = if (lx, ly) == mark { MARK } else { rgb };
        img.set(ox + lx, oy + ly - lift, c);
    }
}

/// Draws the table, then stacked objects in the upper half of their tile,
/// then the held object and finally the gripper fingers on the top row.
pub fn render(state: &EnvState) -> Image {
    let side = state.grid_size * CELL_PX;
    let mut img = Image::filled(side, side, BACKGROUND);
    let cell = |o: &Object| (o.cell.0, o.cell.1);
    for o in &state.objects {
        if o.support.is_none() && state.held != Some(o.id) {
            draw_object(&mut img, o, cell(o), 0);
        }
    }
    // Supports always precede what they carry in a stack, so draw by depth.
    let mut stacked: Vec<(u32, &Object)> = state
        .objects
        .iter()
        .filter(|o| state.held != Some(o.id) && o.support.is_some() && !state.inside_bin(o.id))
        .map(|o| (state.stack_depth(o.id), o))
        .collect();
    stacked.sort_by_key(|(d, o)| (*d, o.id));
    for (_, o) in stacked {
        draw_object(&mut img, o, cell(o), 2);
    }
    let (gx, gy) = state.gripper_pos;
    if let Some(h) = state.held {
        draw_object(&mut img, &state.objects[h], (gx, gy), 2);
    }
    let fingers = if state.gripper_closed { [1, 2] } else { [0, 3] };
    for fx in fingers {
        img.set(gx * CELL_PX + fx, gy * CELL_PX, GRIPPER);
    }
    img
}
