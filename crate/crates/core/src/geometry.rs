//! Grid coordinates, obstacles and the cell traversal used for signal attenuation.

use serde::{Deserialize, Serialize};

/// A cell on the square grid. `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    /// Euclidean distance between cell centers, in grid units.
    pub fn distance(self, other: Pos) -> f64 {
        let dx = f64::from(self.x - other.x);
        let dy = f64::from(self.y - other.y);
        (dx * dx + dy * dy).sqrt()
    }

    pub fn manhattan(self, other: Pos) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn in_grid(self, n: usize) -> bool {
        let n = n as i32;
        (0..n).contains(&self.x) && (0..n).contains(&self.y)
    }

    /// Position scaled to `[0, 1]` on each axis of an `n x n` grid.
    pub fn normalized(self, n: usize) -> [f64; 2] {
        let span = (n.max(2) - 1) as f64;
        [f64::from(self.x) / span, f64::from(self.y) / span]
    }

    pub fn offset(self, dx: i32, dy: i32) -> Pos {
        Pos::new(self.x + dx, self.y + dy)
    }

    /// The four edge-sharing neighbours.
    pub fn neighbors4(self) -> [Pos; 4] {
        [
            self.offset(0, -1),
            self.offset(0, 1),
            self.offset(-1, 0),
            self.offset(1, 0),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// A straight wall of `length` cells starting at `anchor`. Blocks movement in
/// the predator-prey game and attenuates every radio path that crosses it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub anchor: Pos,
    pub orientation: Orientation,
    pub length: usize,
    pub atten_db: f64,
}

impl Obstacle {
    pub fn new(anchor: Pos, orientation: Orientation, length: usize, atten_db: f64) -> Self {
        Self {
            anchor,
            orientation,
            length,
            atten_db,
        }
    }

    /// A one-cell attenuator, used for trees.
    pub fn single(cell: Pos, atten_db: f64) -> Self {
        Self::new(cell, Orientation::Horizontal, 1, atten_db)
    }

    pub fn cells(&self) -> impl Iterator<Item = Pos> + '_ {
        (0..self.length as i32).map(move |i| match self.orientation {
            Orientation::Horizontal => self.anchor.offset(i, 0),
            Orientation::Vertical => self.anchor.offset(0, i),
        })
    }

    pub fn contains(&self, p: Pos) -> bool {
        let len = self.length as i32;
        match self.orientation {
            Orientation::Horizontal => {
                p.y == self.anchor.y && p.x >= self.anchor.x && p.x < self.anchor.x + len
            }
            Orientation::Vertical => {
                p.x == self.anchor.x && p.y >= self.anchor.y && p.y < self.anchor.y + len
            }
        }
    }

    pub fn fits(&self, n: usize) -> bool {
        self.length >= 1 && self.cells().all(|c| c.in_grid(n))
    }
}

/// Every cell touched by the segment joining the centers of `a` and `b`,
/// including both cells at exact corner crossings. Endpoints are included.
pub fn supercover(a: Pos, b: Pos) -> Vec<Pos> {
    let mut out = vec![a];
    let (mut x, mut y) = (a.x, a.y);
    let (mut dx, mut dy) = (b.x - a.x, b.y - a.y);
    let xstep = dx.signum();
    let ystep = dy.signum();
    dx = dx.abs();
    dy = dy.abs();
    let (ddx, ddy) = (2 * dx, 2 * dy);

    if ddx >= ddy {
        let mut error = dx;
        let mut errorprev = dx;
        for _ in 0..dx {
            x += xstep;
            error += ddy;
            if error > ddx {
                y += ystep;
                error -= ddx;
                match (error + errorprev).cmp(&ddx) {
                    std::cmp::Ordering::Less => out.push(Pos::new(x, y - ystep)),
                    std::cmp::Ordering::Greater => out.push(Pos::new(x - xstep, y)),
                    std::cmp::Ordering::Equal => {
                        out.push(Pos::new(x, y - ystep));
                        out.push(Pos::new(x - xstep, y));
                    }
                }
            }
            out.push(Pos::new(x, y));
            errorprev = error;
        }
    } else {
        let mut error = dy;
        let mut errorprev = dy;
        for _ in 0..dy {
            y += ystep;
            error += ddx;
            if error > ddy {
                x += xstep;
                error -= ddy;
                match (error + errorprev).cmp(&ddy) {
                    std::cmp::Ordering::Less => out.push(Pos::new(x - xstep, y)),
                    std::cmp::Ordering::Greater => out.push(Pos::new(x, y - ystep)),
                    std::cmp::Ordering::Equal => {
                        out.push(Pos::new(x - xstep, y));
                        out.push(Pos::new(x, y - ystep));
                    }
                }
            }
            out.push(Pos::new(x, y));
            errorprev = error;
        }
    }
    out
}

/// Number of obstacles crossed by the path between two cells. Each obstacle
/// counts once no matter how many of its cells the path touches; the two
/// endpoint cells themselves are excluded.
pub fn crossed_obstacles<'a>(a: Pos, b: Pos, obstacles: &'a [Obstacle]) -> impl Iterator<Item = &'a Obstacle> {
    let path: Vec<Pos> = if a == b {
        Vec::new()
    } else {
        supercover(a, b)
            .into_iter()
            .filter(|&c| c != a && c != b)
            .collect()
    };
    obstacles
        .iter()
        .filter(move |o| path.iter().any(|&c| o.contains(c)))
}
