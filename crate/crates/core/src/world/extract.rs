use super::{Canvas, ConditionMap, WorldConfig, WorldError, CELLS, SIDE};

/// Plus-shaped smoother with zero padding. Neighbours are summed as
/// `(left + right) + (up + down)`; float addition is commutative, so
/// transposing the input transposes the output exactly.
pub fn smooth(canvas: &Canvas, center_weight: f64) -> Vec<f64> {
    let nw = 0.25 * (1.0 - center_weight);
    let get = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= SIDE as isize || y >= SIDE as isize {
            0.0
        } else {
            canvas.at(x as usize, y as usize)
        }
    };
    let mut out = vec![0.0; CELLS];
    for y in 0..SIDE as isize {
        for x in 0..SIDE as isize {
            let horiz = get(x - 1, y) + get(x + 1, y);
            let vert = get(x, y - 1) + get(x, y + 1);
            out[(y as usize) * SIDE + x as usize] = center_weight * get(x, y) + nw * (horiz + vert);
        }
    }
    out
}

/// Binary condition `smooth(canvas) > τ`; plays the role of a depth or edge
/// extractor.
pub fn extract_condition(canvas: &Canvas, world: &WorldConfig) -> Result<ConditionMap, WorldError> {
    let tau = world.tau();
    let cells = smooth(canvas, world.smooth_center)
        .into_iter()
        .map(|v| v > tau)
        .collect();
    ConditionMap::new(cells)
}
