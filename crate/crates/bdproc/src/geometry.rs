//! Periodic/free simulation windows, minimal-image metric and a cell-list
//! backed particle configuration.
//!
//! Positions are kept canonical in `[0, side)` per axis. All distance logic
//! goes through [`Window::min_image`] so the rest of the crate never wraps
//! coordinates by hand. Dimensions 1..=3 are supported without hard-coding
//! the dimension anywhere downstream.

use thiserror::Error;

/// Maximum supported spatial dimension.
pub const MAX_DIM: usize = 3;

pub type ParticleId = u64;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("dimension must be 1, 2 or 3, got {0}")]
    BadDimension(usize),
    #[error("window side must be positive and finite, got {0}")]
    BadSide(f64),
    #[error("interaction range must be positive and finite, got {0}")]
    BadRange(f64),
    #[error(
        "query radius {radius} exceeds half the window side {half}; \
         under periodic boundaries this would double-count self-images"
    )]
    RadiusExceedsHalfWindow { radius: f64, half: f64 },
    #[error("particle {0} is not live")]
    NoSuchParticle(ParticleId),
    #[error("point has a non-finite coordinate")]
    NonFinitePoint,
}

/// A point in the window; only the first `dim` coordinates are meaningful.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point(pub [f64; MAX_DIM]);

impl Point {
    pub fn zero() -> Self {
        Point([0.0; MAX_DIM])
    }

    pub fn from_slice(coords: &[f64]) -> Self {
        let mut c = [0.0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Point(c)
    }

    pub fn coords(&self, dim: usize) -> &[f64] {
        &self.0[..dim]
    }

    pub fn is_finite(&self, dim: usize) -> bool {
        self.0[..dim].iter().all(|c| c.is_finite())
    }
}

pub fn norm(v: &[f64; MAX_DIM], dim: usize) -> f64 {
    v[..dim].iter().map(|c| c * c).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
    Free,
}

/// Cubic simulation window `[0, side)^dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    dim: usize,
    side: f64,
    boundary: Boundary,
}

impl Window {
    pub fn new(dim: usize, side: f64, boundary: Boundary) -> Result<Self, GeometryError> {
        if dim == 0 || dim > MAX_DIM {
            return Err(GeometryError::BadDimension(dim));
        }
        if !(side.is_finite() && side > 0.0) {
            return Err(GeometryError::BadSide(side));
        }
        Ok(Window { dim, side, boundary })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(self.dim as i32)
    }

    /// Center of the box; radial position-dependent functions are anchored here.
    pub fn center(&self) -> Point {
        let mut c = [0.0; MAX_DIM];
        for x in c[..self.dim].iter_mut() {
            *x = 0.5 * self.side;
        }
        Point(c)
    }

    /// Canonicalize a point into `[0, side)` per axis (periodic) or leave it
    /// untouched (free boundaries keep whatever the caller produced).
    pub fn wrap(&self, p: Point) -> Point {
        match self.boundary {
            Boundary::Free => p,
            Boundary::Periodic => {
                let mut c = p.0;
                for x in c[..self.dim].iter_mut() {
                    *x -= self.side * (*x / self.side).floor();
                    // floor can round such that x == side for tiny negatives
                    if *x >= self.side {
                        *x -= self.side;
                    }
                    if *x < 0.0 {
                        *x = 0.0;
                    }
                }
                Point(c)
            }
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.0[..self.dim].iter().all(|&x| (0.0..self.side).contains(&x))
    }

    /// Minimal-image displacement `to - from`.
    ///
    /// Under periodic boundaries each component lands in `(-side/2, side/2]`;
    /// under free boundaries this is the plain difference.
    pub fn min_image(&self, from: &Point, to: &Point) -> [f64; MAX_DIM] {
        let mut d = [0.0; MAX_DIM];
        for i in 0..self.dim {
            let mut di = to.0[i] - from.0[i];
            if self.boundary == Boundary::Periodic {
                let half = 0.5 * self.side;
                if di > half {
                    di -= self.side;
                } else if di <= -half {
                    di += self.side;
                }
            }
            d[i] = di;
        }
        d
    }

    pub fn distance(&self, a: &Point, b: &Point) -> f64 {
        norm(&self.min_image(a, b), self.dim)
    }

    /// Displacement of `p` from the window center (minimal image).
    pub fn centered(&self, p: &Point) -> [f64; MAX_DIM] {
        self.min_image(&self.center(), p)
    }

    /// Distance of `p` from the window center.
    pub fn radius_from_center(&self, p: &Point) -> f64 {
        norm(&self.centered(p), self.dim)
    }
}

// Per-axis cell counts are capped so the grid memory stays bounded in d = 3.
fn max_cells_per_axis(dim: usize) -> usize {
    match dim {
        1 => 4096,
        2 => 256,
        _ => 64,
    }
}

#[derive(Debug, Clone)]
struct CellGrid {
    cells_per_axis: usize,
    cell_len: f64,
    cells: Vec<Vec<ParticleId>>,
}

impl CellGrid {
    fn new(window: &Window, range: f64) -> CellGrid {
        let m = ((window.side / range).floor() as usize)
            .clamp(1, max_cells_per_axis(window.dim()));
        let cell_len = window.side / m as f64;
        CellGrid {
            cells_per_axis: m,
            cell_len,
            cells: vec![Vec::new(); m.pow(window.dim() as u32)],
        }
    }

    fn axis_index(&self, coord: f64) -> usize {
        ((coord / self.cell_len) as usize).min(self.cells_per_axis - 1)
    }

    fn flat_index(&self, p: &Point, dim: usize) -> usize {
        let mut idx = 0;
        for i in (0..dim).rev() {
            idx = idx * self.cells_per_axis + self.axis_index(p.0[i]);
        }
        idx
    }

    fn insert(&mut self, p: &Point, dim: usize, id: ParticleId) {
        let idx = self.flat_index(p, dim);
        self.cells[idx].push(id);
    }

    fn remove(&mut self, p: &Point, dim: usize, id: ParticleId) {
        let idx = self.flat_index(p, dim);
        let cell = &mut self.cells[idx];
        let pos = cell
            .iter()
            .position(|&x| x == id)
            .expect("cell list out of sync with particle store");
        cell.swap_remove(pos);
    }
}

/// A finite particle configuration over a window, with O(1)-neighborhood
/// queries through the cell list.
#[derive(Debug, Clone)]
pub struct Configuration {
    window: Window,
    range: f64,
    points: Vec<Option<Point>>,
    live: usize,
    grid: CellGrid,
}

impl Configuration {
    /// `range` is the cell-size target; queries with `radius <= range` touch
    /// at most 3^dim cells. Larger radii scan proportionally more shells.
    pub fn new(window: Window, range: f64) -> Result<Self, GeometryError> {
        if !(range.is_finite() && range > 0.0) {
            return Err(GeometryError::BadRange(range));
        }
        Ok(Configuration {
            grid: CellGrid::new(&window, range),
            window,
            range,
            points: Vec::new(),
            live: 0,
        })
    }

    pub fn from_points(
        window: Window,
        range: f64,
        pts: &[Point],
    ) -> Result<Self, GeometryError> {
        let mut cfg = Configuration::new(window, range)?;
        for p in pts {
            cfg.insert(*p)?;
        }
        Ok(cfg)
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn get(&self, id: ParticleId) -> Option<&Point> {
        self.points.get(id as usize).and_then(|p| p.as_ref())
    }

    pub fn iter_live(&self) -> impl Iterator<Item = (ParticleId, &Point)> {
        self.points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (i as ParticleId, p)))
    }

    /// Insert a particle; the point is wrapped into the window first.
    /// Ids are never reused within a configuration.
    pub fn insert(&mut self, p: Point) -> Result<ParticleId, GeometryError> {
        if !p.is_finite(self.window.dim()) {
            return Err(GeometryError::NonFinitePoint);
        }
        let p = self.window.wrap(p);
        let id = self.points.len() as ParticleId;
        self.points.push(Some(p));
        self.grid.insert(&p, self.window.dim(), id);
        self.live += 1;
        Ok(id)
    }

    pub fn remove(&mut self, id: ParticleId) -> Result<Point, GeometryError> {
        let slot = self
            .points
            .get_mut(id as usize)
            .ok_or(GeometryError::NoSuchParticle(id))?;
        let p = slot.take().ok_or(GeometryError::NoSuchParticle(id))?;
        self.grid.remove(&p, self.window.dim(), id);
        self.live -= 1;
        Ok(p)
    }

    fn check_radius(&self, radius: f64) -> Result<(), GeometryError> {
        if self.window.boundary() == Boundary::Periodic && radius > 0.5 * self.window.side() {
            return Err(GeometryError::RadiusExceedsHalfWindow {
                radius,
                half: 0.5 * self.window.side(),
            });
        }
        Ok(())
    }

    /// Visit every particle with minimal-image distance `<= radius` from `x`,
    /// each exactly once, as `(id, displacement x->particle, distance)`.
    /// A particle sitting exactly at `x` is skipped only when its id equals
    /// `exclude`.
    pub fn for_each_neighbor<F>(
        &self,
        x: &Point,
        radius: f64,
        exclude: Option<ParticleId>,
        mut f: F,
    ) -> Result<(), GeometryError>
    where
        F: FnMut(ParticleId, &[f64; MAX_DIM], f64),
    {
        self.check_radius(radius)?;
        let dim = self.window.dim();
        let x = self.window.wrap(*x);
        let m = self.grid.cells_per_axis;
        let shells = (radius / self.grid.cell_len).ceil() as usize;

        // Per-axis candidate cell indices, each physical cell at most once.
        let mut axis_cells: [Vec<usize>; MAX_DIM] = Default::default();
        for (axis, cells) in axis_cells.iter_mut().enumerate().take(dim) {
            let base = self.grid.axis_index(x.0[axis]);
            if 2 * shells + 1 >= m {
                cells.extend(0..m);
            } else {
                for off in -(shells as isize)..=(shells as isize) {
                    let idx = base as isize + off;
                    match self.window.boundary() {
                        Boundary::Periodic => {
                            cells.push(idx.rem_euclid(m as isize) as usize)
                        }
                        Boundary::Free => {
                            if (0..m as isize).contains(&idx) {
                                cells.push(idx as usize);
                            }
                        }
                    }
                }
                if self.window.boundary() == Boundary::Periodic {
                    cells.sort_unstable();
                    cells.dedup();
                }
            }
        }

        let visit = |cell_idx: usize, f: &mut F| {
            for &id in &self.grid.cells[cell_idx] {
                let p = self.points[id as usize]
                    .as_ref()
                    .expect("cell list out of sync with particle store");
                let disp = self.window.min_image(&x, p);
                let dist = norm(&disp, dim);
                if dist <= radius && exclude != Some(id) {
                    f(id, &disp, dist);
                }
            }
        };

        match dim {
            1 => {
                for &i in &axis_cells[0] {
                    visit(i, &mut f);
                }
            }
            2 => {
                for &j in &axis_cells[1] {
                    for &i in &axis_cells[0] {
                        visit(i + m * j, &mut f);
                    }
                }
            }
            _ => {
                for &k in &axis_cells[2] {
                    for &j in &axis_cells[1] {
                        for &i in &axis_cells[0] {
                            visit(i + m * (j + m * k), &mut f);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Convenience wrapper collecting neighbors into a vector.
    pub fn neighbors_within(
        &self,
        x: &Point,
        radius: f64,
        exclude: Option<ParticleId>,
    ) -> Result<Vec<(ParticleId, [f64; MAX_DIM], f64)>, GeometryError> {
        let mut out = Vec::new();
        self.for_each_neighbor(x, radius, exclude, |id, d, r| out.push((id, *d, r)))?;
        Ok(out)
    }

    /// Rebuild the cell list from scratch and compare against the live one.
    /// Returns true when both agree as sets, cell by cell.
    pub fn grid_consistent(&self) -> bool {
        let mut fresh = CellGrid::new(&self.window, self.range);
        for (id, p) in self.iter_live() {
            fresh.insert(p, self.window.dim(), id);
        }
        if fresh.cells.len() != self.grid.cells.len() {
            return false;
        }
        fresh.cells.iter().zip(self.grid.cells.iter()).all(|(a, b)| {
            let mut a = a.clone();
            let mut b = b.clone();
            a.sort_unstable();
            b.sort_unstable();
            a == b
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn w1(side: f64) -> Window {
        Window::new(1, side, Boundary::Periodic).unwrap()
    }

    #[test]
    fn min_image_wraps_to_short_arc() {
        let w = w1(10.0);
        let d = w.min_image(&Point::from_slice(&[1.0]), &Point::from_slice(&[9.0]));
        assert_eq!(d[0], -2.0);
        let d = w.min_image(&Point::from_slice(&[3.0]), &Point::from_slice(&[3.0]));
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn min_image_2d() {
        let w = Window::new(2, 10.0, Boundary::Periodic).unwrap();
        let d = w.min_image(&Point::from_slice(&[0.0, 0.0]), &Point::from_slice(&[9.0, 4.0]));
        assert_eq!(d[0], -1.0);
        assert_eq!(d[1], 4.0);
        assert!((norm(&d, 2) - 17.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn free_boundary_is_plain_difference() {
        let w = Window::new(1, 10.0, Boundary::Free).unwrap();
        let d = w.min_image(&Point::from_slice(&[1.0]), &Point::from_slice(&[9.0]));
        assert_eq!(d[0], 8.0);
    }

    #[test]
    fn neighbors_empty_config() {
        let cfg = Configuration::new(w1(10.0), 1.0).unwrap();
        let found = cfg
            .neighbors_within(&Point::from_slice(&[5.0]), 3.0, None)
            .unwrap();
        assert!(found.is_empty());
    }

    #[test]
    fn neighbors_inclusive_radius_and_exclusion() {
        let w = w1(10.0);
        let mut cfg = Configuration::new(w, 1.0).unwrap();
        let a = cfg.insert(Point::from_slice(&[2.0])).unwrap();
        let b = cfg.insert(Point::from_slice(&[4.0])).unwrap();
        let c = cfg.insert(Point::from_slice(&[9.0])).unwrap();

        // radius exactly reaching a particle includes it; 9 sits at wrapped
        // distance 3 and stays out
        let found = cfg
            .neighbors_within(&Point::from_slice(&[2.0]), 2.0, None)
            .unwrap();
        let ids: Vec<_> = found.iter().map(|(id, _, _)| *id).collect();
        assert!(ids.contains(&a) && ids.contains(&b));
        assert!(!ids.contains(&c));
        let found = cfg
            .neighbors_within(&Point::from_slice(&[2.0]), 2.0, Some(a))
            .unwrap();
        let ids: Vec<_> = found.iter().map(|(id, _, _)| *id).collect();
        assert_eq!(ids, vec![b]);
    }

    #[test]
    fn radius_beyond_half_window_errors() {
        let cfg = Configuration::new(w1(10.0), 1.0).unwrap();
        let err = cfg
            .neighbors_within(&Point::from_slice(&[0.0]), 5.1, None)
            .unwrap_err();
        assert!(matches!(err, GeometryError::RadiusExceedsHalfWindow { .. }));
    }

    fn brute_force(
        cfg: &Configuration,
        x: &Point,
        radius: f64,
        exclude: Option<ParticleId>,
    ) -> Vec<ParticleId> {
        let x = cfg.window().wrap(*x);
        let mut ids: Vec<_> = cfg
            .iter_live()
            .filter(|(id, p)| cfg.window().distance(&x, p) <= radius && Some(*id) != exclude)
            .map(|(id, _)| id)
            .collect();
        ids.sort_unstable();
        ids
    }

    #[test]
    fn randomized_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &(dim, boundary) in &[
            (1, Boundary::Periodic),
            (2, Boundary::Periodic),
            (3, Boundary::Periodic),
            (2, Boundary::Free),
        ] {
            let w = Window::new(dim, 8.0, boundary).unwrap();
            let mut cfg = Configuration::new(w, 1.3).unwrap();
            let mut live: Vec<ParticleId> = Vec::new();
            for step in 0..1000 {
                if live.is_empty() || rng.random::<f64>() < 0.6 {
                    let p = Point::from_slice(
                        &(0..dim).map(|_| rng.random_range(0.0..8.0)).collect::<Vec<_>>(),
                    );
                    live.push(cfg.insert(p).unwrap());
                } else {
                    let k = rng.random_range(0..live.len());
                    let id = live.swap_remove(k);
                    cfg.remove(id).unwrap();
                }
                if step % 100 == 0 {
                    let x = Point::from_slice(
                        &(0..dim).map(|_| rng.random_range(0.0..8.0)).collect::<Vec<_>>(),
                    );
                    let radius = rng.random_range(0.1..3.9);
                    let mut got: Vec<_> = cfg
                        .neighbors_within(&x, radius, None)
                        .unwrap()
                        .iter()
                        .map(|(id, _, _)| *id)
                        .collect();
                    got.sort_unstable();
                    assert_eq!(got, brute_force(&cfg, &x, radius, None));
                }
            }
            assert!(cfg.grid_consistent());
            assert_eq!(cfg.len(), live.len());
        }
    }

    #[test]
    fn remove_dead_particle_errors() {
        let mut cfg = Configuration::new(w1(10.0), 1.0).unwrap();
        let id = cfg.insert(Point::from_slice(&[1.0])).unwrap();
        cfg.remove(id).unwrap();
        assert!(matches!(
            cfg.remove(id),
            Err(GeometryError::NoSuchParticle(_))
        ));
    }

    proptest! {
        #[test]
        fn min_image_norm_bounded(
            dim in 1usize..=3,
            side in 0.5f64..50.0,
            a in prop::collection::vec(0.0f64..1.0, 3),
            b in prop::collection::vec(0.0f64..1.0, 3),
        ) {
            let w = Window::new(dim, side, Boundary::Periodic).unwrap();
            let pa = Point::from_slice(&a.iter().map(|x| x * side).collect::<Vec<_>>());
            let pb = Point::from_slice(&b.iter().map(|x| x * side).collect::<Vec<_>>());
            let d = w.distance(&pa, &pb);
            prop_assert!(d <= (dim as f64).sqrt() * side / 2.0 + 1e-12);
        }

        #[test]
        fn wrap_is_canonical(
            dim in 1usize..=3,
            side in 0.5f64..50.0,
            a in prop::collection::vec(-3.0f64..3.0, 3),
        ) {
            let w = Window::new(dim, side, Boundary::Periodic).unwrap();
            let p = w.wrap(Point::from_slice(&a.iter().map(|x| x * side).collect::<Vec<_>>()));
            prop_assert!(w.contains(&p));
        }
    }
}
