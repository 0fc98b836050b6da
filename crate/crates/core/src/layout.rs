//! Electrode grid, 4D feature maps, region cutting and token embedding.
//!
//! Token order is fixed throughout the crate: index 0 is the class token and
//! region `p` of second `t` sits at `1 + t·G + p`, with regions numbered
//! row-major over the region grid.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{EetError, Result};
use crate::featurize::DeFeatures;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// The default 62-electrode cap on an 8×8 grid, one string per grid row,
/// front (row 0) to back. `-` marks an unused cell.
///
/// Rows follow the scalp lines of the extended 10-20 system. An 8-wide grid
/// cannot hold the 9-electrode lines, so FZ joins the frontopolar row and
/// FCZ, CZ, CPZ sit in the occipital row.
const DEFAULT_GRID: [&str; 8] = [
    "-   FP1 AF3 FPZ FZ  AF4 FP2 -",
    "F7  F5  F3  F1  F2  F4  F6  F8",
    "FT7 FC5 FC3 FC1 FC2 FC4 FC6 FT8",
    "T7  C5  C3  C1  C2  C4  C6  T8",
    "TP7 CP5 CP3 CP1 CP2 CP4 CP6 TP8",
    "P7  P5  P3  P1  P2  P4  P6  P8",
    "PO7 PO5 PO3 PZ  POZ PO4 PO6 PO8",
    "CB1 O1  FCZ CZ  CPZ OZ  O2  CB2",
];

/// Channel order of the default cap.
pub const DEFAULT_CHANNELS: [&str; 62] = [
    "FP1", "FPZ", "FP2", "AF3", "AF4", "F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8", "FT7",
    "FC5", "FC3", "FC1", "FCZ", "FC2", "FC4", "FC6", "FT8", "T7", "C5", "C3", "C1", "CZ", "C2",
    "C4", "C6", "T8", "TP7", "CP5", "CP3", "CP1", "CPZ", "CP2", "CP4", "CP6", "TP8", "P7", "P5",
    "P3", "P1", "PZ", "P2", "P4", "P6", "P8", "PO7", "PO5", "PO3", "POZ", "PO4", "PO6", "PO8",
    "CB1", "O1", "OZ", "O2", "CB2",
];

/// Injective assignment of electrodes (in channel order) to grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodeLayout {
    rows: usize,
    cols: usize,
    names: Vec<String>,
    cells: Vec<(usize, usize)>,
}

impl ElectrodeLayout {
    pub fn new(rows: usize, cols: usize, electrodes: Vec<(String, usize, usize)>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(EetError::config("grid extents must be positive"));
        }
        if electrodes.is_empty() {
            return Err(EetError::config("layout has no electrodes"));
        }
        if electrodes.len() > rows * cols {
            return Err(EetError::config(format!(
                "{} electrodes do not fit a {rows}×{cols} grid",
                electrodes.len()
            )));
        }
        let mut seen_cells = HashSet::new();
        let mut seen_names = HashSet::new();
        for (name, r, c) in &electrodes {
            if *r >= rows || *c >= cols {
                return Err(EetError::config(format!(
                    "electrode {name} at ({r}, {c}) outside {rows}×{cols} grid"
                )));
            }
            if !seen_cells.insert((*r, *c)) {
                return Err(EetError::config(format!("cell ({r}, {c}) assigned twice")));
            }
            if !seen_names.insert(name.clone()) {
                return Err(EetError::config(format!("electrode {name} listed twice")));
            }
        }
        let (names, cells) = electrodes.into_iter().map(|(n, r, c)| (n, (r, c))).unzip();
        Ok(Self {
            rows,
            cols,
            names,
            cells,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cell(&self, channel: usize) -> (usize, usize) {
        self.cells[channel]
    }

    pub fn channel_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Layout over `names` in the given order, each at its cell here.
    /// Names match case-insensitively.
    pub fn restrict(&self, names: &[String]) -> Result<Self> {
        let electrodes = names
            .iter()
            .map(|name| {
                let ch = self
                    .names
                    .iter()
                    .position(|n| n.eq_ignore_ascii_case(name))
                    .ok_or_else(|| {
                        EetError::config(format!("electrode {name} has no grid cell in the layout"))
                    })?;
                let (r, c) = self.cells[ch];
                Ok((name.clone(), r, c))
            })
            .collect::<Result<_>>()?;
        Self::new(self.rows, self.cols, electrodes)
    }

    /// Plain-text table: a `grid,V,H` line, an optional `name,row,col`
    /// header, then one `name,row,col` record per electrode in channel order.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (ln, grid) = lines
            .next()
            .ok_or_else(|| EetError::Parse("layout table is empty".into()))?;
        let fields: Vec<&str> = grid.split(',').map(str::trim).collect();
        let (rows, cols) = match fields.as_slice() {
            ["grid", v, h] => (parse_usize(v, ln)?, parse_usize(h, ln)?),
            _ => {
                return Err(EetError::Parse(format!(
                    "line {ln}: expected `grid,V,H`, got `{grid}`"
                )))
            }
        };
        let mut electrodes = Vec::new();
        for (ln, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            match fields.as_slice() {
                ["name", "row", "col"] => continue,
                [name, r, c] => {
                    electrodes.push((name.to_string(), parse_usize(r, ln)?, parse_usize(c, ln)?))
                }
                _ => {
                    return Err(EetError::Parse(format!(
                        "line {ln}: expected `name,row,col`"
                    )))
                }
            }
        }
        Self::new(rows, cols, electrodes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EetError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("# electrode layout\n");
        let _ = writeln!(out, "grid,{},{}", self.rows, self.cols);
        out.push_str("name,row,col\n");
        for (name, (r, c)) in self.names.iter().zip(&self.cells) {
            let _ = writeln!(out, "{name},{r},{c}");
        }
        out
    }
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.parse()
        .map_err(|_| EetError::Parse(format!("line {line}: `{s}` is not a non-negative integer")))
}

impl Default for ElectrodeLayout {
    fn default() -> Self {
        let mut electrodes = Vec::with_capacity(DEFAULT_CHANNELS.len());
        for name in DEFAULT_CHANNELS {
            let (r, c) = DEFAULT_GRID
                .iter()
                .enumerate()
                .find_map(|(r, row)| {
                    row.split_whitespace()
                        .position(|n| n == name)
                        .map(|c| (r, c))
                })
                .expect("every default channel is on the grid");
            electrodes.push((name.to_string(), r, c));
        }
        Self::new(8, 8, electrodes).expect("default layout is valid")
    }
}

/// DE features on the electrode grid, laid out `T × S × V × H`.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature4D {
    seconds: usize,
    bands: usize,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Feature4D {
    pub fn new(
        seconds: usize,
        bands: usize,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if seconds * bands * rows * cols == 0 {
            return Err(EetError::contract("Feature4D extents must be positive"));
        }
        if values.len() != seconds * bands * rows * cols {
            return Err(EetError::Shape {
                op: "feature4d",
                left: vec![seconds, bands, rows, cols],
                right: vec![values.len()],
            });
        }
        Ok(Self {
            seconds,
            bands,
            rows,
            cols,
            values,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.seconds, self.bands, self.rows, self.cols]
    }

    pub fn seconds(&self) -> usize {
        self.seconds
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    fn offset(&self, t: usize, s: usize, r: usize, c: usize) -> usize {
        ((t * self.bands + s) * self.rows + r) * self.cols + c
    }

    pub fn get(&self, t: usize, s: usize, r: usize, c: usize) -> f64 {
        self.values[self.offset(t, s, r, c)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Places each electrode's DE at its grid cell; unassigned cells are 0.
pub fn map_to_grid(features: &DeFeatures, layout: &ElectrodeLayout) -> Result<Feature4D> {
    let (seconds, channels, bands) = features.shape();
    if channels != layout.channels() {
        return Err(EetError::config(format!(
            "features have {channels} channels, layout has {}",
            layout.channels()
        )));
    }
    let mut out = Feature4D::new(
        seconds,
        bands,
        layout.rows,
        layout.cols,
        vec![0.0; seconds * bands * layout.rows * layout.cols],
    )?;
    for t in 0..seconds {
        for s in 0..bands {
            for (ch, &(r, c)) in layout.cells.iter().enumerate() {
                let o = out.offset(t, s, r, c);
                out.values[o] = features.get(t, ch, s);
            }
        }
    }
    Ok(out)
}

/// Flattened `P×P×S` regions: row `t·G + p` holds region `p` of second `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSequence {
    regions: usize,
    seconds: usize,
    side: usize,
    bands: usize,
    vectors: Tensor,
}

impl RegionSequence {
    /// Regions per second, `G`.
    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn seconds(&self) -> usize {
        self.seconds
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Region vector length `S·P²`.
    pub fn width(&self) -> usize {
        self.bands * self.side * self.side
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn vector(&self, p: usize, t: usize) -> &[f64] {
        self.vectors.row(t * self.regions + p)
    }

    /// Number of tokens after embedding, `G·T + 1`.
    pub fn token_count(&self) -> usize {
        self.regions * self.seconds + 1
    }
}

/// Cuts every second into `G = VH/P²` aligned `P×P` regions, row-major.
/// Each region flattens band-major, then row, then column.
pub fn patchify(x: &Feature4D, side: usize) -> Result<RegionSequence> {
    if side == 0 || !x.rows.is_multiple_of(side) || !x.cols.is_multiple_of(side) {
        return Err(EetError::config(format!(
            "region side {side} does not divide the {}×{} grid",
            x.rows, x.cols
        )));
    }
    let (gr, gc) = (x.rows / side, x.cols / side);
    let regions = gr * gc;
    let width = x.bands * side * side;
    let mut data = Vec::with_capacity(x.seconds * regions * width);
    for t in 0..x.seconds {
        for pr in 0..gr {
            for pc in 0..gc {
                for s in 0..x.bands {
                    for r in 0..side {
                        for c in 0..side {
                            data.push(x.get(t, s, pr * side + r, pc * side + c));
                        }
                    }
                }
            }
        }
    }
    Ok(RegionSequence {
        regions,
        seconds: x.seconds,
        side,
        bands: x.bands,
        vectors: Tensor::new(vec![x.seconds * regions, width], data)?,
    })
}

/// Inverse of [`patchify`] for a `rows × cols` grid.
pub fn unpatchify(seq: &RegionSequence, rows: usize, cols: usize) -> Result<Feature4D> {
    let side = seq.side;
    if !rows.is_multiple_of(side)
        || !cols.is_multiple_of(side)
        || (rows / side) * (cols / side) != seq.regions
    {
        return Err(EetError::config(format!(
            "{} regions of side {side} do not tile a {rows}×{cols} grid",
            seq.regions
        )));
    }
    let gc = cols / side;
    let mut out = Feature4D::new(
        seq.seconds,
        seq.bands,
        rows,
        cols,
        vec![0.0; seq.seconds * seq.bands * rows * cols],
    )?;
    for t in 0..seq.seconds {
        for p in 0..seq.regions {
            let (pr, pc) = (p / gc, p % gc);
            let v = seq.vector(p, t);
            let mut i = 0;
            for s in 0..seq.bands {
                for r in 0..side {
                    for c in 0..side {
                        let o = out.offset(t, s, pr * side + r, pc * side + c);
                        out.values[o] = v[i];
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Embedded tokens, `(G·T + 1) × D`, class token first.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub regions: usize,
    pub seconds: usize,
    pub tokens: Tensor,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.regions * self.seconds + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Row index of region `p` at second `t`.
    pub fn index(&self, p: usize, t: usize) -> usize {
        token_index(self.regions, p, t)
    }
}

pub fn token_index(regions: usize, p: usize, t: usize) -> usize {
    1 + t * regions + p
}

/// `z_(p,t) = M·I_(p,t) + pos_(p,t)`, class token `cls + pos_0`, recorded on
/// `graph`. `regions` is `(G·T) × S·P²`, `m` is `D × S·P²`, `pos` is
/// `(G·T + 1) × D` and `cls` is `1 × D`.
pub fn embed_in_graph(graph: &mut Graph, regions: Var, m: Var, pos: Var, cls: Var) -> Result<Var> {
    let (n, w) = graph.value(regions).require2("embed")?;
    let (d, mw) = graph.value(m).require2("embed")?;
    if w != mw {
        return Err(EetError::config(format!(
            "embedding matrix is {d}×{mw}, region vectors have length {w}"
        )));
    }
    if graph.value(pos).shape() != [n + 1, d] {
        return Err(EetError::config(format!(
            "positional table is {:?}, expected [{}, {d}]",
            graph.value(pos).shape(),
            n + 1
        )));
    }
    if graph.value(cls).shape() != [1, d] {
        return Err(EetError::config(format!(
            "class token is {:?}, expected [1, {d}]",
            graph.value(cls).shape()
        )));
    }
    let projected = graph.matmul_nt(regions, m)?;
    let stacked = graph.concat_rows(&[cls, projected])?;
    graph.add(stacked, pos)
}

/// Stand-alone embedding of a region sequence.
pub fn embed(
    regions: &RegionSequence,
    m: &Tensor,
    pos: &Tensor,
    cls: &Tensor,
) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let r = g.constant(regions.vectors.clone());
    let (mv, pv, cv) = (
        g.constant(m.clone()),
        g.constant(pos.clone()),
        g.constant(cls.clone()),
    );
    let z = embed_in_graph(&mut g, r, mv, pv, cv)?;
    Ok(TokenSequence {
        regions: regions.regions,
        seconds: regions.seconds,
        tokens: g.value(z).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::params::ParamSet;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_features(seconds: usize, channels: usize, bands: usize, seed: u64) -> DeFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(&[seconds * channels * bands], 1.0, &mut rng);
        DeFeatures::new(seconds, channels, bands, t.into_data()).unwrap()
    }

    #[test]
    fn default_layout_covers_62_channels() {
        let l = ElectrodeLayout::default();
        assert_eq!((l.rows(), l.cols(), l.channels()), (8, 8, 62));
        assert_eq!(l.channel_of("CZ"), Some(27));
    }

    #[test]
    fn default_layout_leaves_two_zero_cells_per_slice() {
        let layout = ElectrodeLayout::default();
        let f = random_features(10, 62, 5, 4);
        let x = map_to_grid(&f, &layout).unwrap();
        assert_eq!(x.shape(), [10, 5, 8, 8]);
        for t in 0..10 {
            for s in 0..5 {
                let zeros = (0..8)
                    .flat_map(|r| (0..8).map(move |c| (r, c)))
                    .filter(|&(r, c)| x.get(t, s, r, c) == 0.0)
                    .count();
                assert_eq!(zeros, 2);
            }
        }
    }

    #[test]
    fn single_electrode_fills_one_cell() {
        let layout = ElectrodeLayout::new(2, 2, vec![("A".into(), 0, 0)]).unwrap();
        let f = DeFeatures::new(3, 1, 2, vec![3.0; 6]).unwrap();
        let x = map_to_grid(&f, &layout).unwrap();
        for t in 0..3 {
            for s in 0..2 {
                let nonzero: Vec<f64> = (0..4)
                    .map(|i| x.get(t, s, i / 2, i % 2))
                    .filter(|&v| v != 0.0)
                    .collect();
                assert_eq!(nonzero, vec![3.0]);
            }
        }
    }

    #[test]
    fn channel_count_mismatch_is_a_config_error() {
        let f = random_features(2, 10, 5, 1);
        assert!(matches!(
            map_to_grid(&f, &ElectrodeLayout::default()),
            Err(EetError::Config(_))
        ));
    }

    #[test]
    fn layout_rejects_duplicates_and_out_of_range() {
        let e = |n: &str, r, c| (n.to_string(), r, c);
        assert!(ElectrodeLayout::new(2, 2, vec![e("A", 0, 0), e("B", 0, 0)]).is_err());
        assert!(ElectrodeLayout::new(2, 2, vec![e("A", 2, 0)]).is_err());
        assert!(ElectrodeLayout::new(1, 1, vec![e("A", 0, 0), e("B", 0, 0)]).is_err());
    }

    #[test]
    fn layout_table_round_trips() {
        let l = ElectrodeLayout::default();
        assert_eq!(ElectrodeLayout::parse(&l.to_table()).unwrap(), l);
        assert!(ElectrodeLayout::parse("name,row,col\nA,0,0\n").is_err());
        assert!(ElectrodeLayout::parse("grid,2,2\nA,zero,0\n").is_err());
    }

    #[test]
    fn default_grid_gives_sixteen_regions_of_twenty() {
        let x = map_to_grid(&random_features(10, 62, 5, 2), &ElectrodeLayout::default()).unwrap();
        let seq = patchify(&x, 2).unwrap();
        assert_eq!((seq.regions(), seq.width()), (16, 20));
        assert_eq!(seq.token_count(), 161);
    }

    #[test]
    fn whole_grid_region_is_slice_flattening() {
        let x = map_to_grid(&random_features(2, 62, 5, 3), &ElectrodeLayout::default()).unwrap();
        let seq = patchify(&x, 8).unwrap();
        assert_eq!(seq.regions(), 1);
        assert_eq!(seq.vector(0, 1), &x.values()[5 * 64..10 * 64]);
    }

    #[test]
    fn region_side_must_divide_grid() {
        let x = Feature4D::new(1, 1, 8, 8, vec![0.0; 64]).unwrap();
        assert!(matches!(patchify(&x, 3), Err(EetError::Config(_))));
    }

    #[test]
    fn region_flattening_order_is_band_row_col() {
        let x = Feature4D::new(1, 2, 2, 4, (0..16).map(f64::from).collect()).unwrap();
        let seq = patchify(&x, 2).unwrap();
        // Region 1 is the right half: cols 2..4.
        assert_eq!(
            seq.vector(1, 0),
            &[2.0, 3.0, 6.0, 7.0, 10.0, 11.0, 14.0, 15.0]
        );
    }

    proptest! {
        #[test]
        fn patchify_round_trip_is_exact(
            t in 1usize..4, s in 1usize..4, gr in 1usize..4, gc in 1usize..4, p in 1usize..4, seed in 0u64..1000
        ) {
            let (v, h) = (gr * p, gc * p);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals = Tensor::randn(&[t * s * v * h], 1.0, &mut rng).into_data();
            let x = Feature4D::new(t, s, v, h, vals).unwrap();
            let seq = patchify(&x, p).unwrap();
            prop_assert_eq!(seq.token_count(), gr * gc * t + 1);
            prop_assert_eq!(unpatchify(&seq, v, h).unwrap(), x);
        }
    }

    fn toy_sequence(seed: u64) -> RegionSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = Tensor::randn(&[2 * 2 * 4 * 4], 1.0, &mut rng).into_data();
        patchify(&Feature4D::new(2, 2, 4, 4, vals).unwrap(), 2).unwrap()
    }

    #[test]
    fn zero_embedding_gives_zero_tokens() {
        let seq = toy_sequence(1);
        let d = 6;
        let z = embed(
            &seq,
            &Tensor::zeros(&[d, seq.width()]),
            &Tensor::zeros(&[seq.token_count(), d]),
            &Tensor::full(&[1, d], 0.5),
        )
        .unwrap();
        assert_eq!(z.len(), 9);
        assert!(z.tokens.data()[d..].iter().all(|&v| v == 0.0));
        assert!(z.tokens.row(0).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_embedding_reproduces_regions() {
        let seq = toy_sequence(2);
        let w = seq.width();
        let z = embed(
            &seq,
            &Tensor::identity(w),
            &Tensor::zeros(&[9, w]),
            &Tensor::zeros(&[1, w]),
        )
        .unwrap();
        for t in 0..2 {
            for p in 0..4 {
                assert_eq!(z.tokens.row(z.index(p, t)), seq.vector(p, t));
            }
        }
    }

    #[test]
    fn embedding_dimension_mismatch_is_config_error() {
        let seq = toy_sequence(3);
        let res = embed(
            &seq,
            &Tensor::zeros(&[4, 5]),
            &Tensor::zeros(&[9, 4]),
            &Tensor::zeros(&[1, 4]),
        );
        assert!(matches!(res, Err(EetError::Config(_))));
        let res = embed(
            &seq,
            &Tensor::zeros(&[4, 8]),
            &Tensor::zeros(&[8, 4]),
            &Tensor::zeros(&[1, 4]),
        );
        assert!(matches!(res, Err(EetError::Config(_))));
    }

    #[test]
    fn permuting_regions_permutes_tokens() {
        let seq = toy_sequence(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Tensor::randn(&[3, seq.width()], 1.0, &mut rng);
        let pos = Tensor::zeros(&[9, 3]);
        let cls = Tensor::zeros(&[1, 3]);
        let z = embed(&seq, &m, &pos, &cls).unwrap();
        // Swap regions 0 and 2 of second 1.
        let mut swapped = seq.clone();
        let w = seq.width();
        let (a, b) = (4 * w, 4 * w + 2 * w);
        let data = swapped.vectors.data_mut();
        for i in 0..w {
            data.swap(a + i, b + i);
        }
        let zs = embed(&swapped, &m, &pos, &cls).unwrap();
        assert_eq!(zs.tokens.row(z.index(0, 1)), z.tokens.row(z.index(2, 1)));
        assert_eq!(zs.tokens.row(z.index(2, 1)), z.tokens.row(z.index(0, 1)));
        assert_eq!(zs.tokens.row(z.index(1, 0)), z.tokens.row(z.index(1, 0)));
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let seq = toy_sequence(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamSet::new();
        params.insert("m", Tensor::randn(&[3, seq.width()], 0.5, &mut rng));
        params.insert("pos", Tensor::randn(&[9, 3], 0.5, &mut rng));
        params.insert("cls", Tensor::randn(&[1, 3], 0.5, &mut rng));
        let probe = Tensor::randn(&[9, 3], 1.0, &mut rng);
        let build = |p: &ParamSet| -> Result<(Graph, crate::params::BoundParams, Var)> {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let r = g.constant(seq.vectors().clone());
            let z = embed_in_graph(&mut g, r, b.var("m")?, b.var("pos")?, b.var("cls")?)?;
            let pr = g.constant(probe.clone());
            let zz = g.mul(z, z)?;
            let w = g.mul(zz, pr)?;
            let s = g.sum(w)?;
            Ok((g, b, s))
        };
        let (g, b, s) = build(&params).unwrap();
        let analytic = b.gradients(&params, g.backward(s).unwrap());
        let report = grad_check(
            |p| build(p).map(|(g, _, s)| g.value(s).item()),
            &analytic,
            &params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
