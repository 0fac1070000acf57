use crate::geometry::BBox;

/// Spatial size and stride of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    /// Index into the pyramid (0 = finest).
    pub level: usize,
}

/// Anchors for every cell of every level.
///
/// `scales` are side lengths in units of the level stride, so one scale
/// list covers all levels. A ratio `r` is width / height and keeps the
/// area: `w = s·√r`, `h = s/√r`. Within a level anchors are ordered
/// `(anchor type, row, col)`, matching the `[1, A, H, W]` layout of the
/// objectness map; anchor type is scale-major.
pub fn generate_anchors(levels: &[LevelShape], scales: &[f64], ratios: &[f64]) -> Vec<Anchor> {
    let mut anchors = Vec::with_capacity(
        levels.iter().map(|l| l.height * l.width).sum::<usize>() * scales.len() * ratios.len(),
    );
    for (li, level) in levels.iter().enumerate() {
        let stride = level.stride as f64;
        for &scale in scales {
            for &ratio in ratios {
                let side = scale * stride;
                let w = side * ratio.sqrt();
                let h = side / ratio.sqrt();
                for y in 0..level.height {
                    for x in 0..level.width {
                        let cx = (x as f64 + 0.5) * stride;
                        let cy = (y as f64 + 0.5) * stride;
                        anchors.push(Anchor {
                            bbox: BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h),
                            level: li,
                        });
                    }
                }
            }
        }
    }
    anchors
}
