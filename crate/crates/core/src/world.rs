//! Planar occupancy world: procedural generation, agent kinematics, range
//! sensing and line-of-sight queries.
//!
//! Cell `(i, j)` covers `[i·res, (i+1)·res) × [j·res, (j+1)·res)`; cells are
//! stored row-major with `j` (the y index) as the row. Anything outside the
//! grid counts as occupied.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Vec2};

/// Axis-aligned box in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec2,
    pub max: Vec2,
}

impl Aabb {
    pub fn distance_to_point(&self, p: Vec2) -> f64 {
        let dx = (self.min.x - p.x).max(0.0).max(p.x - self.max.x);
        let dy = (self.min.y - p.y).max(0.0).max(p.y - self.max.y);
        dx.hypot(dy)
    }

    fn corners(&self) -> [Vec2; 4] {
        [
            self.min,
            Vec2::new(self.max.x, self.min.y),
            self.max,
            Vec2::new(self.min.x, self.max.y),
        ]
    }

    /// Liang–Barsky clip test: does segment `ab` touch the box?
    pub fn intersects_segment(&self, a: Vec2, b: Vec2) -> bool {
        let d = b - a;
        let mut t0 = 0.0_f64;
        let mut t1 = 1.0_f64;
        for (p, q) in [
            (-d.x, a.x - self.min.x),
            (d.x, self.max.x - a.x),
            (-d.y, a.y - self.min.y),
            (d.y, self.max.y - a.y),
        ] {
            if p == 0.0 {
                if q < 0.0 {
                    return false;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }

    /// Euclidean distance between segment `ab` and the box (0 when they touch).
    pub fn distance_to_segment(&self, a: Vec2, b: Vec2) -> f64 {
        if self.intersects_segment(a, b) {
            return 0.0;
        }
        let mut best = self.distance_to_point(a).min(self.distance_to_point(b));
        for c in self.corners() {
            let t = crate::geometry::project_onto_segment(c, a, b);
            best = best.min(c.distance(a.lerp(b, t)));
        }
        best
    }
}

/// Procedural generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MazeParams {
    /// Cell size in meters.
    pub resolution: f64,
    /// Target fraction of interior cells covered by walls and blocks.
    pub obstacle_density: f64,
    /// Side length of the room grid used for corridor walls; 0 disables rooms.
    pub room_size: f64,
    pub wall_thickness: f64,
    pub door_width: f64,
    /// Probability that a wall outside the spanning tree still gets a door.
    pub loop_prob: f64,
    pub block_min: f64,
    pub block_max: f64,
    /// Connectivity is maintained for a disc of this radius.
    pub clearance: f64,
    /// Center of the spawn region, as a fraction of (width, height).
    pub spawn: [f64; 2],
    pub spawn_radius: f64,
}

impl Default for MazeParams {
    fn default() -> Self {
        Self {
            resolution: 0.1,
            obstacle_density: 0.15,
            room_size: 3.0,
            wall_thickness: 0.2,
            door_width: 1.2,
            loop_prob: 0.3,
            block_min: 0.4,
            block_max: 1.2,
            clearance: 0.3,
            spawn: [0.125, 0.125],
            spawn_radius: 0.5,
        }
    }
}

/// Static obstacle field with a walled boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyWorld {
    width: f64,
    height: f64,
    resolution: f64,
    nx: usize,
    ny: usize,
    cells: Vec<bool>,
    seed: u64,
}

fn validate_dims(width: f64, height: f64, resolution: f64) -> Result<(usize, usize)> {
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(Error::Config(format!("resolution must be > 0, got {resolution}")));
    }
    if !(width > 0.0 && height > 0.0) || !width.is_finite() || !height.is_finite() {
        return Err(Error::Config(format!(
            "world dimensions must be > 0, got {width}x{height}"
        )));
    }
    let mut counts = [0usize; 2];
    for (k, dim) in [width, height].into_iter().enumerate() {
        let n = dim / resolution;
        if (n - n.round()).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "resolution {resolution} does not divide dimension {dim}"
            )));
        }
        counts[k] = n.round() as usize;
    }
    if counts[0] < 3 || counts[1] < 3 {
        return Err(Error::Config("world must span at least 3 cells per axis".into()));
    }
    Ok((counts[0], counts[1]))
}

impl OccupancyWorld {
    /// Open arena: only the boundary ring of cells is occupied.
    pub fn empty(width: f64, height: f64, resolution: f64, seed: u64) -> Result<Self> {
        let (nx, ny) = validate_dims(width, height, resolution)?;
        let mut cells = vec![false; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                if i == 0 || j == 0 || i == nx - 1 || j == ny - 1 {
                    cells[j * nx + i] = true;
                }
            }
        }
        Ok(Self {
            width,
            height,
            resolution,
            nx,
            ny,
            cells,
            seed,
        })
    }

    /// Builds a world from an explicit occupancy array. Boundary cells are forced occupied.
    pub fn from_cells(
        width: f64,
        height: f64,
        resolution: f64,
        seed: u64,
        mut cells: Vec<bool>,
    ) -> Result<Self> {
        let (nx, ny) = validate_dims(width, height, resolution)?;
        if cells.len() != nx * ny {
            return Err(Error::Shape(format!(
                "expected {} cells, got {}",
                nx * ny,
                cells.len()
            )));
        }
        for j in 0..ny {
            for i in 0..nx {
                if i == 0 || j == 0 || i == nx - 1 || j == ny - 1 {
                    cells[j * nx + i] = true;
                }
            }
        }
        Ok(Self {
            width,
            height,
            resolution,
            nx,
            ny,
            cells,
            seed,
        })
    }

    pub fn width(&self) -> f64 {
        self.width
    }
    pub fn height(&self) -> f64 {
        self.height
    }
    pub fn resolution(&self) -> f64 {
        self.resolution
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn grid_size(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn in_bounds(&self, p: Vec2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= self.width && p.y <= self.height
    }

    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        if !p.is_finite() || p.x < 0.0 || p.y < 0.0 {
            return None;
        }
        let i = (p.x / self.resolution).floor() as usize;
        let j = (p.y / self.resolution).floor() as usize;
        (i < self.nx && j < self.ny).then_some((i, j))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(
            (i as f64 + 0.5) * self.resolution,
            (j as f64 + 0.5) * self.resolution,
        )
    }

    pub fn cell_box(&self, i: usize, j: usize) -> Aabb {
        let r = self.resolution;
        Aabb {
            min: Vec2::new(i as f64 * r, j as f64 * r),
            max: Vec2::new((i + 1) as f64 * r, (j + 1) as f64 * r),
        }
    }

    /// Out-of-grid indices count as occupied.
    pub fn is_occupied(&self, i: i64, j: i64) -> bool {
        if i < 0 || j < 0 || i as usize >= self.nx || j as usize >= self.ny {
            return true;
        }
        self.cells[j as usize * self.nx + i as usize]
    }

    pub fn is_occupied_at(&self, p: Vec2) -> bool {
        match self.cell_of(p) {
            Some((i, j)) => self.cells[j * self.nx + i],
            None => true,
        }
    }

    /// Distance from `p` to the nearest occupied cell, saturating at `max_dist`.
    pub fn point_clearance(&self, p: Vec2, max_dist: f64) -> f64 {
        if self.is_occupied_at(p) {
            return 0.0;
        }
        let r = self.resolution;
        let span = (max_dist / r).ceil() as i64 + 1;
        let ci = (p.x / r).floor() as i64;
        let cj = (p.y / r).floor() as i64;
        let mut best = max_dist;
        for j in (cj - span)..=(cj + span) {
            for i in (ci - span)..=(ci + span) {
                if !self.is_occupied(i, j) {
                    continue;
                }
                let d = if i < 0 || j < 0 || i as usize >= self.nx || j as usize >= self.ny {
                    // Outside the grid: distance to the grid boundary itself.
                    let b = Aabb {
                        min: Vec2::new(i as f64 * r, j as f64 * r),
                        max: Vec2::new((i + 1) as f64 * r, (j + 1) as f64 * r),
                    };
                    b.distance_to_point(p)
                } else {
                    self.cell_box(i as usize, j as usize).distance_to_point(p)
                };
                if d < best {
                    best = d;
                }
            }
        }
        best
    }

    /// True when a disc of `radius` centered at `p` overlaps no occupied cell.
    pub fn disc_is_free(&self, p: Vec2, radius: f64) -> bool {
        self.in_bounds(p) && self.point_clearance(p, radius + self.resolution) >= radius
    }

    /// True iff segment `ab`, inflated by `clearance`, intersects no occupied cell.
    ///
    /// Candidate cells are enumerated column by column over the capsule's
    /// footprint and each occupied one is tested with an exact segment–box
    /// distance, so the result is symmetric in `a` and `b`.
    pub fn line_of_sight(&self, a: Vec2, b: Vec2, clearance: f64) -> bool {
        if !self.in_bounds(a) || !self.in_bounds(b) {
            return false;
        }
        let res = self.resolution;
        let (lo, hi) = if (a.x, a.y) <= (b.x, b.y) { (a, b) } else { (b, a) };
        let r = clearance.max(0.0);
        let i0 = ((lo.x - r) / res).floor() as i64;
        let i1 = ((hi.x + r) / res).floor() as i64;
        let dx = hi.x - lo.x;
        for i in i0..=i1 {
            // Portion of the segment whose x lies within reach of this column.
            let x0 = (i as f64 * res - r).max(lo.x);
            let x1 = ((i + 1) as f64 * res + r).min(hi.x);
            let (ya, yb) = if dx <= 1e-12 {
                (lo.y.min(hi.y), lo.y.max(hi.y))
            } else if x0 > x1 {
                continue;
            } else {
                let y_at = |x: f64| lo.y + (hi.y - lo.y) * ((x - lo.x) / dx);
                let (p, q) = (y_at(x0), y_at(x1));
                (p.min(q), p.max(q))
            };
            let j0 = ((ya - r) / res).floor() as i64;
            let j1 = ((yb + r) / res).floor() as i64;
            for j in j0..=j1 {
                if !self.is_occupied(i, j) {
                    continue;
                }
                let cell = Aabb {
                    min: Vec2::new(i as f64 * res, j as f64 * res),
                    max: Vec2::new((i + 1) as f64 * res, (j + 1) as f64 * res),
                };
                if cell.distance_to_segment(lo, hi) <= r {
                    return false;
                }
            }
        }
        true
    }

    /// Distance along a ray to the first occupied cell (grid DDA), capped at `max_range`.
    pub fn cast_ray(&self, origin: Vec2, angle: f64, max_range: f64) -> f64 {
        let res = self.resolution;
        let Some((ci, cj)) = self.cell_of(origin) else {
            return f64::MIN_POSITIVE;
        };
        if self.cells[cj * self.nx + ci] {
            return f64::MIN_POSITIVE;
        }
        let (dy, dx) = angle.sin_cos();
        let (mut i, mut j) = (ci as i64, cj as i64);
        let step_i: i64 = if dx > 0.0 { 1 } else { -1 };
        let step_j: i64 = if dy > 0.0 { 1 } else { -1 };
        let mut t_max_x = if dx.abs() < 1e-15 {
            f64::INFINITY
        } else {
            let edge = if dx > 0.0 { (i + 1) as f64 } else { i as f64 } * res;
            (edge - origin.x) / dx
        };
        let mut t_max_y = if dy.abs() < 1e-15 {
            f64::INFINITY
        } else {
            let edge = if dy > 0.0 { (j + 1) as f64 } else { j as f64 } * res;
            (edge - origin.y) / dy
        };
        let t_dx = if dx.abs() < 1e-15 { f64::INFINITY } else { res / dx.abs() };
        let t_dy = if dy.abs() < 1e-15 { f64::INFINITY } else { res / dy.abs() };
        loop {
            let t = if t_max_x < t_max_y {
                i += step_i;
                let t = t_max_x;
                t_max_x += t_dx;
                t
            } else {
                j += step_j;
                let t = t_max_y;
                t_max_y += t_dy;
                t
            };
            if t >= max_range {
                return max_range;
            }
            if self.is_occupied(i, j) {
                return t.max(f64::MIN_POSITIVE);
            }
        }
    }

    /// Cells whose centers keep at least `clearance` from every occupied cell.
    pub fn inflated_free(&self, clearance: f64) -> Vec<bool> {
        let mut free = vec![false; self.nx * self.ny];
        for j in 0..self.ny {
            for i in 0..self.nx {
                if self.cells[j * self.nx + i] {
                    continue;
                }
                let c = self.cell_center(i, j);
                free[j * self.nx + i] = self.point_clearance(c, clearance + self.resolution) >= clearance;
            }
        }
        free
    }

    /// 4-connected flood fill over `free` starting at the cell containing `start`.
    pub fn flood_fill(&self, free: &[bool], start: Vec2) -> Vec<bool> {
        let mut seen = vec![false; self.nx * self.ny];
        if let Some((i, j)) = self.cell_of(start) {
            flood(self.nx, self.ny, free, &mut seen, i, j);
        }
        seen
    }

    /// Whether a disc of radius `clearance` can travel from `a` to `b`, judged on the
    /// inflated grid.
    pub fn reachable(&self, a: Vec2, b: Vec2, clearance: f64) -> bool {
        let free = self.inflated_free(clearance);
        let seen = self.flood_fill(&free, a);
        match self.cell_of(b) {
            Some((i, j)) => seen[j * self.nx + i],
            None => false,
        }
    }

    /// Uniform sample from free space with at least `clearance` to obstacles.
    pub fn sample_free_point<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        clearance: f64,
        max_attempts: usize,
    ) -> Option<Vec2> {
        for _ in 0..max_attempts {
            let p = Vec2::new(
                rng.random::<f64>() * self.width,
                rng.random::<f64>() * self.height,
            );
            if self.point_clearance(p, clearance + self.resolution) > clearance {
                return Some(p);
            }
        }
        None
    }

    /// Fraction of interior (non-boundary) cells that are occupied.
    pub fn interior_density(&self) -> f64 {
        let mut occ = 0usize;
        for j in 1..self.ny - 1 {
            for i in 1..self.nx - 1 {
                if self.cells[j * self.nx + i] {
                    occ += 1;
                }
            }
        }
        occ as f64 / ((self.nx - 2) * (self.ny - 2)) as f64
    }

    /// Copy of this world shifted by whole cells, padded with occupied cells.
    pub fn translated(&self, di: usize, dj: usize) -> OccupancyWorld {
        let nx = self.nx + di;
        let ny = self.ny + dj;
        let mut cells = vec![true; nx * ny];
        for j in 0..self.ny {
            for i in 0..self.nx {
                cells[(j + dj) * nx + i + di] = self.cells[j * self.nx + i];
            }
        }
        OccupancyWorld {
            width: nx as f64 * self.resolution,
            height: ny as f64 * self.resolution,
            resolution: self.resolution,
            nx,
            ny,
            cells,
            seed: self.seed,
        }
    }

    fn fill_rect(&mut self, rect: &CellRect, value: bool) {
        for j in rect.j0..rect.j1 {
            for i in rect.i0..rect.i1 {
                self.cells[j * self.nx + i] = value;
            }
        }
    }

    /// Serializes to the compact grid format: a header line
    /// `width height resolution seed`, then one line per grid row (y ascending)
    /// holding alternating run lengths that start with a free run.
    pub fn to_grid_string(&self) -> String {
        let mut out = format!("{} {} {} {}\n", self.width, self.height, self.resolution, self.seed);
        for j in 0..self.ny {
            let row = &self.cells[j * self.nx..(j + 1) * self.nx];
            let mut current = false;
            let mut run = 0usize;
            let mut first = true;
            for &c in row {
                if c == current {
                    run += 1;
                } else {
                    if !first {
                        out.push(' ');
                    }
                    let _ = write!(out, "{run}");
                    first = false;
                    current = c;
                    run = 1;
                }
            }
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{run}");
            out.push('\n');
        }
        out
    }

    pub fn from_grid_string(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                origin,
                hline + 1,
                "header must be `width height resolution seed`",
            ));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .map_err(|e| Error::parse(origin, hline + 1, format!("field {k}: {e}")))
        };
        let (width, height, resolution) = (num(0)?, num(1)?, num(2)?);
        let seed = fields[3]
            .parse::<u64>()
            .map_err(|e| Error::parse(origin, hline + 1, format!("seed: {e}")))?;
        let (nx, ny) = validate_dims(width, height, resolution)?;
        let mut cells = Vec::with_capacity(nx * ny);
        let mut rows = 0usize;
        for (ln, line) in lines {
            let mut value = false;
            let mut count = 0usize;
            for tok in line.split_whitespace() {
                let run: usize = tok
                    .parse()
                    .map_err(|e| Error::parse(origin, ln + 1, format!("run length `{tok}`: {e}")))?;
                cells.extend(std::iter::repeat_n(value, run));
                count += run;
                value = !value;
            }
            if count != nx {
                return Err(Error::parse(
                    origin,
                    ln + 1,
                    format!("row has {count} cells, expected {nx}"),
                ));
            }
            rows += 1;
        }
        if rows != ny {
            return Err(Error::parse(
                origin,
                hline + 1,
                format!("found {rows} rows, expected {ny}"),
            ));
        }
        OccupancyWorld::from_cells(width, height, resolution, seed, cells)
    }
}

fn flood(nx: usize, ny: usize, free: &[bool], seen: &mut [bool], i: usize, j: usize) {
    if !free[j * nx + i] {
        return;
    }
    let mut queue = VecDeque::new();
    seen[j * nx + i] = true;
    queue.push_back((i, j));
    while let Some((i, j)) = queue.pop_front() {
        let mut visit = |ni: usize, nj: usize| {
            let k = nj * nx + ni;
            if free[k] && !seen[k] {
                seen[k] = true;
                queue.push_back((ni, nj));
            }
        };
        if i > 0 {
            visit(i - 1, j);
        }
        if i + 1 < nx {
            visit(i + 1, j);
        }
        if j > 0 {
            visit(i, j - 1);
        }
        if j + 1 < ny {
            visit(i, j + 1);
        }
    }
}

/// Half-open cell-index rectangle.
#[derive(Debug, Clone, Copy)]
struct CellRect {
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
}

impl CellRect {
    fn from_world(world: &OccupancyWorld, min: Vec2, max: Vec2) -> Option<CellRect> {
        let r = world.resolution;
        let clamp_i = |v: f64| ((v / r).round().max(1.0) as usize).min(world.nx - 1);
        let clamp_j = |v: f64| ((v / r).round().max(1.0) as usize).min(world.ny - 1);
        let rect = CellRect {
            i0: clamp_i(min.x),
            i1: clamp_i(max.x),
            j0: clamp_j(min.y),
            j1: clamp_j(max.y),
        };
        (rect.i0 < rect.i1 && rect.j0 < rect.j1).then_some(rect)
    }


    fn aabb(&self, res: f64) -> Aabb {
        Aabb {
            min: Vec2::new(self.i0 as f64 * res, self.j0 as f64 * res),
            max: Vec2::new(self.i1 as f64 * res, self.j1 as f64 * res),
        }
    }
}

struct Candidate {
    rects: Vec<CellRect>,
}

/// Room-and-corridor maze with scattered blocks, deterministic per seed.
///
/// Room walls come from a randomized spanning tree over a grid of rooms (every
/// tree edge gets a door, other edges get one with `loop_prob`); blocks are then
/// scattered until `obstacle_density` is reached. Any candidate obstacle that
/// would disconnect the clearance-inflated free space is discarded, so every
/// inflated-free cell stays reachable from the spawn region.
pub fn generate_maze(seed: u64, width: f64, height: f64, params: &MazeParams) -> Result<OccupancyWorld> {
    if width < 4.0 || height < 4.0 {
        return Err(Error::Config(format!(
            "maze dimensions must be at least 4 m, got {width}x{height}"
        )));
    }
    if !(0.0..1.0).contains(&params.obstacle_density) {
        return Err(Error::Config(format!(
            "obstacle_density must be in [0, 1), got {}",
            params.obstacle_density
        )));
    }
    if params.block_min <= 0.0 || params.block_max < params.block_min {
        return Err(Error::Config("block_min must be > 0 and <= block_max".into()));
    }
    let mut world = OccupancyWorld::empty(width, height, params.resolution, seed)?;
    if params.obstacle_density == 0.0 {
        return Ok(world);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_7a65_u64);
    let spawn = Vec2::new(params.spawn[0] * width, params.spawn[1] * height);
    let res = params.resolution;

    let mut candidates: Vec<Candidate> = room_walls(&world, params, &mut rng);
    candidates.shuffle(&mut rng);
    let n_blocks = ((width * height) / (params.block_min * params.block_min)).ceil() as usize;
    for _ in 0..n_blocks {
        let w = rng.random_range(params.block_min..=params.block_max);
        let h = rng.random_range(params.block_min..=params.block_max);
        let x = rng.random_range(0.0..(width - w).max(1e-9));
        let y = rng.random_range(0.0..(height - h).max(1e-9));
        if let Some(rect) = CellRect::from_world(&world, Vec2::new(x, y), Vec2::new(x + w, y + h)) {
            candidates.push(Candidate { rects: vec![rect] });
        }
    }

    let interior = ((world.nx - 2) * (world.ny - 2)) as f64;
    let mut occupied = 0usize;
    let mut inflated = world.inflated_free(params.clearance);
    let total_free = |f: &[bool]| f.iter().filter(|&&v| v).count();

    for cand in candidates {
        if occupied as f64 / interior >= params.obstacle_density {
            break;
        }
        let blocks_spawn = cand
            .rects
            .iter()
            .any(|r| r.aabb(res).distance_to_point(spawn) < params.spawn_radius + params.clearance);
        if blocks_spawn {
            continue;
        }
        let before_cells = world.cells.clone();
        let before_inflated = inflated.clone();
        let mut added = 0usize;
        for rect in &cand.rects {
            for j in rect.j0..rect.j1 {
                for i in rect.i0..rect.i1 {
                    if !world.cells[j * world.nx + i] {
                        added += 1;
                    }
                }
            }
            world.fill_rect(rect, true);
            mark_inflated(&world, &mut inflated, rect, params.clearance);
        }
        let seen = world.flood_fill(&inflated, spawn);
        let reachable = seen.iter().filter(|&&v| v).count();
        if added == 0 || reachable != total_free(&inflated) || reachable == 0 {
            world.cells = before_cells;
            inflated = before_inflated;
        } else {
            occupied += added;
        }
    }
    Ok(world)
}

fn mark_inflated(world: &OccupancyWorld, inflated: &mut [bool], rect: &CellRect, clearance: f64) {
    let res = world.resolution;
    let pad = (clearance / res).ceil() as usize + 1;
    let bx = rect.aabb(res);
    for j in rect.j0.saturating_sub(pad)..(rect.j1 + pad).min(world.ny) {
        for i in rect.i0.saturating_sub(pad)..(rect.i1 + pad).min(world.nx) {
            let k = j * world.nx + i;
            if inflated[k] && bx.distance_to_point(world.cell_center(i, j)) < clearance {
                inflated[k] = false;
            }
            if world.cells[k] {
                inflated[k] = false;
            }
        }
    }
}

fn room_walls<R: Rng>(world: &OccupancyWorld, params: &MazeParams, rng: &mut R) -> Vec<Candidate> {
    if params.room_size <= 0.0 {
        return Vec::new();
    }
    let rooms_x = ((world.width / params.room_size).round() as usize).max(1);
    let rooms_y = ((world.height / params.room_size).round() as usize).max(1);
    let rw = world.width / rooms_x as f64;
    let rh = world.height / rooms_y as f64;
    let t = params.wall_thickness / 2.0;

    // Edge between room (a) and room (b); vertical walls separate horizontal neighbours.
    #[derive(Clone, Copy)]
    struct Edge {
        a: usize,
        b: usize,
        vertical: bool,
        k: usize,
        cell: usize,
    }
    let mut edges = Vec::new();
    for cy in 0..rooms_y {
        for cx in 0..rooms_x {
            let id = cy * rooms_x + cx;
            if cx + 1 < rooms_x {
                edges.push(Edge { a: id, b: id + 1, vertical: true, k: cx + 1, cell: cy });
            }
            if cy + 1 < rooms_y {
                edges.push(Edge { a: id, b: id + rooms_x, vertical: false, k: cy + 1, cell: cx });
            }
        }
    }
    edges.shuffle(rng);
    let mut parent: Vec<usize> = (0..rooms_x * rooms_y).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }

    let mut out = Vec::new();
    for e in edges {
        let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
        let in_tree = ra != rb;
        if in_tree {
            parent[ra] = rb;
        }
        let door = in_tree || rng.random::<f64>() < params.loop_prob;
        // Wall runs along `span` at fixed coordinate `at`.
        let (at, span_lo, span_hi) = if e.vertical {
            (e.k as f64 * rw, e.cell as f64 * rh, (e.cell + 1) as f64 * rh)
        } else {
            (e.k as f64 * rh, e.cell as f64 * rw, (e.cell + 1) as f64 * rw)
        };
        let mut pieces = Vec::new();
        let span_len = span_hi - span_lo;
        if door && span_len > params.door_width + 0.4 {
            let d0 = rng.random_range(span_lo + 0.2..span_hi - params.door_width - 0.2);
            pieces.push((span_lo, d0));
            pieces.push((d0 + params.door_width, span_hi));
        } else if !door {
            pieces.push((span_lo, span_hi));
        }
        let rects = pieces
            .into_iter()
            .filter_map(|(s0, s1)| {
                let (min, max) = if e.vertical {
                    (Vec2::new(at - t, s0), Vec2::new(at + t, s1))
                } else {
                    (Vec2::new(s0, at - t), Vec2::new(s1, at + t))
                };
                CellRect::from_world(world, min, max)
            })
            .collect::<Vec<_>>();
        if !rects.is_empty() {
            out.push(Candidate { rects });
        }
    }
    out
}

/// Pose and velocity of the holonomic disc agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    /// Radians, wrapped to (−π, π].
    pub heading: f64,
    /// Body-frame linear velocity, m/s.
    pub lin_vel: Vec2,
    /// rad/s
    pub ang_vel: f64,
}

impl AgentState {
    pub fn at(position: Vec2, heading: f64) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
            lin_vel: Vec2::ZERO,
            ang_vel: 0.0,
        }
    }
}

/// Commanded body-frame twist.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl Twist {
    pub fn new(vx: f64, vy: f64, omega: f64) -> Self {
        Self { vx, vy, omega }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.vx, self.vy, self.omega]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub radius: f64,
    /// Command limits for (v_x, v_y, ω).
    pub max_command: [f64; 3],
    pub substeps: usize,
    pub dt: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            radius: 0.3,
            max_command: [1.0, 0.5, 1.0],
            substeps: 10,
            dt: 0.2,
        }
    }
}

impl AgentConfig {
    pub fn clamp(&self, t: Twist) -> Twist {
        let m = self.max_command;
        Twist::new(
            t.vx.clamp(-m[0], m[0]),
            t.vy.clamp(-m[1], m[1]),
            t.omega.clamp(-m[2], m[2]),
        )
    }
}

/// Integrates a body-frame twist over `dt` with `cfg.substeps` Euler sub-steps.
///
/// On contact the agent stops at the last collision-free point of the offending
/// sub-step (bisection) and the rest of the step is dropped.
pub fn step_agent(
    world: &OccupancyWorld,
    state: &AgentState,
    action: Twist,
    dt: f64,
    cfg: &AgentConfig,
) -> (AgentState, bool) {
    let cmd = cfg.clamp(action);
    let n = cfg.substeps.max(1);
    let h = dt / n as f64;
    let mut pos = state.position;
    let mut heading = state.heading;
    let mut collision = false;

    if !world.disc_is_free(pos, cfg.radius) {
        collision = true;
    } else {
        for _ in 0..n {
            let disp = Vec2::new(cmd.vx, cmd.vy).rotate(heading) * h;
            let target = pos + disp;
            if world.disc_is_free(target, cfg.radius) {
                pos = target;
                heading += cmd.omega * h;
                continue;
            }
            let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if world.disc_is_free(pos + disp * mid, cfg.radius) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            pos = pos + disp * lo;
            collision = true;
            break;
        }
    }

    let next = AgentState {
        position: pos,
        heading: wrap_angle(heading),
        lin_vel: if collision { Vec2::ZERO } else { Vec2::new(cmd.vx, cmd.vy) },
        ang_vel: if collision { 0.0 } else { cmd.omega },
    };
    (next, collision)
}

/// Planar range scan from the agent's forward-facing sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeScan {
    pub ranges: Vec<f64>,
    pub fov: f64,
    pub max_range: f64,
}

impl RangeScan {
    pub fn bearing(&self, i: usize) -> f64 {
        let n = self.ranges.len();
        -self.fov / 2.0 + i as f64 * self.fov / (n - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub n_rays: usize,
    /// Degrees.
    pub fov_deg: f64,
    pub max_range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            n_rays: 64,
            fov_deg: 105.0,
            max_range: 10.0,
        }
    }
}

/// Ray `i` points at `heading − fov/2 + i·fov/(n_rays − 1)`.
pub fn raycast_scan(world: &OccupancyWorld, state: &AgentState, n_rays: usize, fov: f64, max_range: f64) -> RangeScan {
    assert!(n_rays >= 2, "raycast_scan needs at least two rays");
    let step = fov / (n_rays - 1) as f64;
    let ranges = (0..n_rays)
        .map(|i| {
            let angle = state.heading - fov / 2.0 + i as f64 * step;
            world.cast_ray(state.position, angle, max_range)
        })
        .collect();
    RangeScan {
        ranges,
        fov,
        max_range,
    }
}

/// Random heading in (−π, π].
pub fn random_heading<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    wrap_angle(rng.random_range(-PI..PI))
}

pub fn save_world(world: &OccupancyWorld, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, world.to_grid_string().as_bytes())
}

pub fn load_world(path: &Path) -> Result<OccupancyWorld> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    OccupancyWorld::from_grid_string(&text, path)
}
