use crate::geometry::BBox;

/// Upper bound on decoded log-scale width/height deltas.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Standard box delta parameterisation: center offsets relative to the
/// reference size and log-scale width/height ratios, each multiplied by a
/// per-coordinate weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl BoxCoder {
    pub const RPN: Self = Self { weights: [1.0; 4] };
    pub const HEAD: Self = Self {
        weights: [10.0, 10.0, 5.0, 5.0],
    };

    pub fn encode(&self, reference: &BBox, target: &BBox) -> [f64; 4] {
        let [wx, wy, ww, wh] = self.weights;
        let (rw, rh) = (reference.width(), reference.height());
        let (rx, ry) = reference.center();
        let (tw, th) = (target.width(), target.height());
        let (tx, ty) = target.center();
        [
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * (tw / rw).ln(),
            wh * (th / rh).ln(),
        ]
    }

    pub fn decode(&self, reference: &BBox, deltas: [f64; 4]) -> BBox {
        let [wx, wy, ww, wh] = self.weights;
        let (rw, rh) = (reference.width(), reference.height());
        let (rx, ry) = reference.center();
        let dx = deltas[0] / wx;
        let dy = deltas[1] / wy;
        let dw = (deltas[2] / ww).min(MAX_LOG_SCALE);
        let dh = (deltas[3] / wh).min(MAX_LOG_SCALE);
        let cx = rx + dx * rw;
        let cy = ry + dy * rh;
        let w = rw * dw.exp();
        let h = rh * dh.exp();
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}
