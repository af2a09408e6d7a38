use super::dt::{dt_2d, MessageMap};
use super::{AnchorSet, Placement, Pos, ShapeModel, StarModel};
use crate::error::{Error, Result};
use crate::features::{convolve, FeatureGrid};
use crate::map::Map2;

/// Appearance response of every part at every valid placement.
pub fn part_responses(model: &StarModel, grid: &FeatureGrid) -> Result<Vec<Map2<f64>>> {
    if grid.dim() != model.dim {
        return Err(Error::Data(format!(
            "grid has {} channels, model expects {}",
            grid.dim(),
            model.dim
        )));
    }
    model
        .parts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.h > grid.rows() || p.w > grid.cols() {
                return Err(Error::Size(format!(
                    "part {i} ({}x{}) larger than {}x{} grid",
                    p.h,
                    p.w,
                    grid.rows(),
                    grid.cols()
                )));
            }
            convolve(grid, &p.weights, p.h, p.w)
        })
        .collect()
}

/// Half-open range of root coordinates `r` with `0 <= r + shift < len`.
#[inline]
fn shifted_range(root_len: usize, shift: i64, len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as i64 - shift).clamp(0, root_len as i64) as usize;
    (lo.min(hi), hi)
}

/// Valid root rectangle for one anchor set over maps of the given sizes.
fn admissible_rect(
    root: &Map2<f64>,
    maps: &[&Map2<f64>],
    offsets: &[Pos],
) -> Option<(usize, usize, usize, usize)> {
    let (mut r0, mut r1) = (0, root.rows());
    let (mut c0, mut c1) = (0, root.cols());
    for (m, o) in maps.iter().zip(offsets) {
        let (a, b) = shifted_range(root.rows(), o.row, m.rows());
        let (c, d) = shifted_range(root.cols(), o.col, m.cols());
        r0 = r0.max(a);
        r1 = r1.min(b);
        c0 = c0.max(c);
        c1 = c1.min(d);
    }
    (r0 < r1 && c0 < c1).then_some((r0, r1, c0, c1))
}

/// Root-plus-messages score for one anchor set, merged into `best` where it
/// is strictly larger (so earlier mixtures win ties).
fn accumulate_messages(
    root: &Map2<f64>,
    messages: &[&Map2<f64>],
    anchors: &[Pos],
    mixture: u32,
    best: &mut Map2<f64>,
    best_idx: &mut Map2<u32>,
    tmp: &mut Vec<f64>,
) {
    let Some((r0, r1, c0, c1)) = admissible_rect(root, messages, anchors) else {
        return;
    };
    let width = c1 - c0;
    for r in r0..r1 {
        tmp.clear();
        tmp.extend_from_slice(&root.row(r)[c0..c1]);
        for (msg, a) in messages.iter().zip(anchors) {
            let row = msg.row((r as i64 + a.row) as usize);
            let start = (c0 as i64 + a.col) as usize;
            for (t, &v) in tmp.iter_mut().zip(&row[start..start + width]) {
                *t += v;
            }
        }
        let best_row = best.row_mut(r);
        let idx_row = best_idx.row_mut(r);
        for (k, &v) in tmp.iter().enumerate() {
            if v > best_row[c0 + k] {
                best_row[c0 + k] = v;
                idx_row[c0 + k] = mixture;
            }
        }
    }
}

fn messages_for(
    model: &StarModel,
    responses: &[Map2<f64>],
) -> Result<Vec<MessageMap>> {
    responses[1..]
        .iter()
        .zip(&model.springs)
        .map(|(resp, s)| dt_2d(resp, s.bx, s.by))
        .collect()
}

fn placement_from_messages(
    messages: &[MessageMap],
    anchors: &[Pos],
    root: Pos,
) -> Placement {
    let mut parts = Vec::with_capacity(anchors.len() + 1);
    parts.push(root);
    for (msg, a) in messages.iter().zip(anchors) {
        let p = root + *a;
        parts.push(msg.argmax.get(p.row as usize, p.col as usize));
    }
    Placement(parts)
}

/// Single-anchor DP scores over root locations.
#[derive(Clone, Debug)]
pub struct DpmScore {
    pub scores: Map2<f64>,
    pub messages: Vec<MessageMap>,
    pub anchors: AnchorSet,
}

impl DpmScore {
    /// Best part placement for the root at `(row, col)`; `None` if inadmissible.
    pub fn placement(&self, row: usize, col: usize) -> Option<Placement> {
        self.scores.get(row, col).is_finite().then(|| {
            placement_from_messages(&self.messages, &self.anchors, Pos::new(row as i64, col as i64))
        })
    }
}

/// DPM inference: root response plus one distance-transformed message per
/// part, read at the anchored offset. Uses `model.anchors` whatever the
/// model's shape variant.
pub fn score_dpm(model: &StarModel, grid: &FeatureGrid) -> Result<DpmScore> {
    let responses = part_responses(model, grid)?;
    let messages = messages_for(model, &responses)?;
    let root = &responses[0];
    let mut scores = Map2::filled(root.rows(), root.cols(), f64::NEG_INFINITY);
    let mut idx = Map2::filled(root.rows(), root.cols(), 0u32);
    let maps: Vec<&Map2<f64>> = messages.iter().map(|m| &m.values).collect();
    accumulate_messages(root, &maps, &model.anchors, 0, &mut scores, &mut idx, &mut Vec::new());
    Ok(DpmScore {
        scores,
        messages,
        anchors: model.anchors.clone(),
    })
}

/// Exemplar-DPM scores: best mixture per root location.
#[derive(Clone, Debug)]
pub struct EdpmScore {
    pub scores: Map2<f64>,
    pub mixture: Map2<u32>,
    pub messages: Vec<MessageMap>,
    pub anchor_sets: Vec<AnchorSet>,
}

impl EdpmScore {
    pub fn placement(&self, row: usize, col: usize) -> Option<Placement> {
        self.scores.get(row, col).is_finite().then(|| {
            let m = self.mixture.get(row, col) as usize;
            placement_from_messages(
                &self.messages,
                &self.anchor_sets[m],
                Pos::new(row as i64, col as i64),
            )
        })
    }
}

/// EDPM inference with shared messages: one distance transform per non-root
/// part regardless of the number of mixtures; each mixture only costs shifted
/// lookups. Ties between mixtures go to the lower index.
pub fn score_edpm(model: &StarModel, grid: &FeatureGrid) -> Result<EdpmScore> {
    let ShapeModel::Edpm { exemplars } = &model.shape else {
        return Err(Error::Model(format!(
            "score_edpm needs an EDPM model, got {}",
            model.shape.tag()
        )));
    };
    let responses = part_responses(model, grid)?;
    let messages = messages_for(model, &responses)?;
    let root = &responses[0];
    let mut scores = Map2::filled(root.rows(), root.cols(), f64::NEG_INFINITY);
    let mut mixture = Map2::filled(root.rows(), root.cols(), 0u32);
    let maps: Vec<&Map2<f64>> = messages.iter().map(|m| &m.values).collect();
    let mut tmp = Vec::with_capacity(root.cols());
    for (m, anchors) in exemplars.iter().enumerate() {
        accumulate_messages(root, &maps, anchors, m as u32, &mut scores, &mut mixture, &mut tmp);
    }
    Ok(EdpmScore {
        scores,
        mixture,
        messages,
        anchor_sets: exemplars.clone(),
    })
}

/// Reference EDPM inference: an independent [`score_dpm`] per mixture (each
/// recomputing responses and messages), maximized with ties to the lower index.
pub fn score_edpm_per_mixture(model: &StarModel, grid: &FeatureGrid) -> Result<EdpmScore> {
    let ShapeModel::Edpm { exemplars } = &model.shape else {
        return Err(Error::Model("per-mixture EDPM needs an EDPM model".into()));
    };
    let mut best: Option<(Map2<f64>, Map2<u32>, Vec<MessageMap>)> = None;
    for (m, anchors) in exemplars.iter().enumerate() {
        let mut single = model.clone();
        single.anchors = anchors.clone();
        single.shape = ShapeModel::Dpm;
        let s = score_dpm(&single, grid)?;
        match &mut best {
            None => {
                let idx = Map2::filled(s.scores.rows(), s.scores.cols(), 0u32);
                best = Some((s.scores, idx, s.messages));
            }
            Some((scores, idx, _)) => {
                for r in 0..scores.rows() {
                    for c in 0..scores.cols() {
                        if s.scores.get(r, c) > scores.get(r, c) {
                            scores.set(r, c, s.scores.get(r, c));
                            idx.set(r, c, m as u32);
                        }
                    }
                }
            }
        }
    }
    let (scores, mixture, messages) = best.expect("validated model has exemplars");
    Ok(EdpmScore {
        scores,
        mixture,
        messages,
        anchor_sets: exemplars.clone(),
    })
}

/// Exemplar-part-model scores: best exemplar layout per root location.
#[derive(Clone, Debug)]
pub struct EpmScore {
    pub scores: Map2<f64>,
    pub exemplar: Map2<u32>,
    pub offsets: Vec<AnchorSet>,
}

impl EpmScore {
    pub fn placement(&self, row: usize, col: usize) -> Option<Placement> {
        self.scores.get(row, col).is_finite().then(|| {
            let m = self.exemplar.get(row, col) as usize;
            Placement::from_root_and_offsets(Pos::new(row as i64, col as i64), &self.offsets[m])
        })
    }
}

/// EPM inference by enumeration over exemplar layouts with cached part
/// responses. Each layout is scored with the DPM shape term at its offsets.
pub fn score_epm(model: &StarModel, grid: &FeatureGrid) -> Result<EpmScore> {
    let ShapeModel::Epm { exemplars } = &model.shape else {
        return Err(Error::Model(format!(
            "score_epm needs an EPM model, got {}",
            model.shape.tag()
        )));
    };
    let responses = part_responses(model, grid)?;
    let root = &responses[0];
    let mut scores = Map2::filled(root.rows(), root.cols(), f64::NEG_INFINITY);
    let mut exemplar = Map2::filled(root.rows(), root.cols(), 0u32);
    let maps: Vec<&Map2<f64>> = responses[1..].iter().collect();
    let mut tmp = Vec::with_capacity(root.cols());
    for (m, offsets) in exemplars.iter().enumerate() {
        let Some((r0, r1, c0, c1)) = admissible_rect(root, &maps, offsets) else {
            continue;
        };
        let width = c1 - c0;
        for r in r0..r1 {
            tmp.clear();
            tmp.extend_from_slice(&root.row(r)[c0..c1]);
            for (j, (resp, o)) in maps.iter().zip(offsets).enumerate() {
                let spring = model.springs[j];
                let d = *o - model.anchors[j];
                let row = resp.row((r as i64 + o.row) as usize);
                let start = (c0 as i64 + o.col) as usize;
                for (t, &v) in tmp.iter_mut().zip(&row[start..start + width]) {
                    *t += spring.apply(v, d);
                }
            }
            let best_row = scores.row_mut(r);
            let idx_row = exemplar.row_mut(r);
            for (k, &v) in tmp.iter().enumerate() {
                if v > best_row[c0 + k] {
                    best_row[c0 + k] = v;
                    idx_row[c0 + k] = m as u32;
                }
            }
        }
    }
    Ok(EpmScore {
        scores,
        exemplar,
        offsets: exemplars.clone(),
    })
}

/// Inference dispatched on the model's shape variant.
#[derive(Clone, Debug)]
pub enum StarScore {
    Dpm(DpmScore),
    Epm(EpmScore),
    Edpm(EdpmScore),
}

impl StarScore {
    pub fn scores(&self) -> &Map2<f64> {
        match self {
            StarScore::Dpm(s) => &s.scores,
            StarScore::Epm(s) => &s.scores,
            StarScore::Edpm(s) => &s.scores,
        }
    }

    pub fn component(&self, row: usize, col: usize) -> usize {
        match self {
            StarScore::Dpm(_) => 0,
            StarScore::Epm(s) => s.exemplar.get(row, col) as usize,
            StarScore::Edpm(s) => s.mixture.get(row, col) as usize,
        }
    }

    pub fn placement(&self, row: usize, col: usize) -> Option<Placement> {
        match self {
            StarScore::Dpm(s) => s.placement(row, col),
            StarScore::Epm(s) => s.placement(row, col),
            StarScore::Edpm(s) => s.placement(row, col),
        }
    }
}

pub fn score_star(model: &StarModel, grid: &FeatureGrid) -> Result<StarScore> {
    Ok(match model.shape {
        ShapeModel::Dpm => StarScore::Dpm(score_dpm(model, grid)?),
        ShapeModel::Epm { .. } => StarScore::Epm(score_epm(model, grid)?),
        ShapeModel::Edpm { .. } => StarScore::Edpm(score_edpm(model, grid)?),
    })
}
