use super::{ViewKind, CHANNELS};

const AGENT: usize = 0;
const GOAL: usize = 1;
const WALL: usize = 2;

/// Renders one `CHANNELS × size × size` frame by nearest-cell sampling.
pub fn render_view(
    kind: ViewKind,
    size: usize,
    grid: usize,
    walls: &[bool],
    goal: (usize, usize),
    agent: (usize, usize),
) -> Vec<f64> {
    let mut img = vec![0.0; CHANNELS * size * size];
    let (window, centre) = match kind {
        ViewKind::FullMap => (grid, None),
        ViewKind::AgentCrop { window } => (window, Some(agent)),
        ViewKind::GoalCrop { window } => (window, Some(goal)),
    };
    let half = (window / 2) as isize;
    for py in 0..size {
        for px in 0..size {
            let cy = (py * window / size) as isize;
            let cx = (px * window / size) as isize;
            let (r, c) = match centre {
                None => (cy, cx),
                Some((r0, c0)) => (r0 as isize + cy - half, c0 as isize + cx - half),
            };
            let pix = py * size + px;
            if r < 0 || c < 0 || r >= grid as isize || c >= grid as isize {
                img[WALL * size * size + pix] = 1.0;
                continue;
            }
            let cell = (r as usize, c as usize);
            if walls[cell.0 * grid + cell.1] {
                img[WALL * size * size + pix] = 1.0;
            }
            if cell == goal {
                img[GOAL * size * size + pix] = 1.0;
            }
            if cell == agent {
                img[AGENT * size * size + pix] = 1.0;
            }
        }
    }
    img
}
