//! D3Q19 TRT stream-collide solver over the sparse list.
//!
//! Each partition owns a contiguous range of fluid indices plus ghost copies
//! of the remote cells its records reference. Populations are stored
//! structure-of-arrays (`f[q * slots + slot]`), owned slots first. Every
//! population is pulled through a precomputed flat source index, so a solid
//! neighbor simply points at the opposite population of the cell itself.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::adjacency::{opposite, SparseRecord, DIRECTIONS, STENCIL};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::partition::{chunk_ranges, PartitionAssignment};
use crate::sparse_io::{open_sparse, read_ic_range, SparseHeader};

/// Populations per cell: rest plus the 18 stencil directions.
pub const Q: usize = DIRECTIONS + 1;

/// Floating point operations per fluid cell update used for the estimate.
pub const FLOPS_PER_UPDATE: f64 = 200.0;

/// Cells updated per parallel work item.
const CELL_BLOCK: usize = 4096;

const fn velocities() -> [[i32; 3]; Q] {
    let mut v = [[0; 3]; Q];
    let mut d = 0;
    while d < DIRECTIONS {
        v[d + 1] = STENCIL[d];
        d += 1;
    }
    v
}

/// Population `0` is at rest, population `d + 1` moves along `STENCIL[d]`.
pub const VELOCITIES: [[i32; 3]; Q] = velocities();

const fn weights() -> [f64; Q] {
    let mut w = [0.0; Q];
    w[0] = 1.0 / 3.0;
    let mut q = 1;
    while q < Q {
        let c = VELOCITIES[q];
        let norm = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
        w[q] = if norm == 1 { 1.0 / 18.0 } else { 1.0 / 36.0 };
        q += 1;
    }
    w
}

pub const WEIGHTS: [f64; Q] = weights();

#[inline]
pub const fn opposite_population(q: usize) -> usize {
    if q == 0 {
        0
    } else {
        opposite(q - 1) + 1
    }
}

/// Equilibrium populations for density `rho` and velocity `u`.
pub fn equilibrium(rho: f64, u: [f64; 3]) -> [f64; Q] {
    let usq = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    let mut f = [0.0; Q];
    for q in 0..Q {
        let c = VELOCITIES[q];
        let cu = c[0] as f64 * u[0] + c[1] as f64 * u[1] + c[2] as f64 * u[2];
        f[q] = WEIGHTS[q] * rho * (1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * usq);
    }
    f
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrtParams {
    pub tau_plus: f64,
    pub magic_lambda: f64,
    pub force: [f64; 3],
}

impl TrtParams {
    pub const DEFAULT_LAMBDA: f64 = 3.0 / 16.0;

    pub fn new(tau_plus: f64, magic_lambda: f64, force: [f64; 3]) -> Result<Self> {
        let p = TrtParams {
            tau_plus,
            magic_lambda,
            force,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_plus > 0.5 && self.tau_plus.is_finite()) {
            return Err(Error::Parameter(format!(
                "tau_plus must exceed 1/2, got {}",
                self.tau_plus
            )));
        }
        if !(self.magic_lambda > 0.0 && self.magic_lambda.is_finite()) {
            return Err(Error::Parameter(format!(
                "magic parameter must be positive, got {}",
                self.magic_lambda
            )));
        }
        if self.force.iter().any(|g| !g.is_finite()) {
            return Err(Error::Parameter(format!(
                "non-finite body force {:?}",
                self.force
            )));
        }
        Ok(())
    }

    pub fn viscosity(&self) -> f64 {
        (self.tau_plus - 0.5) / 3.0
    }

    pub fn tau_minus(&self) -> f64 {
        0.5 + self.magic_lambda / (self.tau_plus - 0.5)
    }
}

/// Cells exchanged with one peer partition, ascending by contiguous index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Channel {
    pub peer: usize,
    pub ics: Vec<u64>,
    /// Local slots the populations are read from (send) or written to (recv).
    pub slots: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LocalDomain {
    part: usize,
    range: Range<u64>,
    coords: Vec<[u32; 3]>,
    ghost_ics: Vec<u64>,
    pull: Vec<usize>,
    src: Vec<f64>,
    dst: Vec<f64>,
    send: Vec<Channel>,
    recv: Vec<Channel>,
}

/// Build a domain from the records of partition `part`.
pub fn localize(
    records: &[SparseRecord],
    assignment: &PartitionAssignment,
    part: usize,
) -> Result<LocalDomain> {
    let range = assignment.range(part);
    let owned = records.len();
    if owned as u64 != range.end - range.start
        || records
            .iter()
            .enumerate()
            .any(|(i, r)| r.ic != range.start + i as u64)
    {
        return Err(Error::Data(format!(
            "records of partition {part} do not cover indices {range:?}"
        )));
    }
    let local = |ic: u64| range.contains(&ic).then(|| (ic - range.start) as usize);

    let mut ghosts = BTreeMap::new();
    let mut send: BTreeMap<usize, Channel> = BTreeMap::new();
    for r in records {
        for &n in &r.nbr {
            if n == 0 || local(n).is_some() {
                continue;
            }
            if n > assignment.fluid_cells() {
                return Err(Error::Data(format!(
                    "cell {} references index {n} past N_f",
                    r.ic
                )));
            }
            ghosts.insert(n, ());
            let peer = assignment.partition_of(n);
            let ch = send.entry(peer).or_insert_with(|| Channel {
                peer,
                ics: Vec::new(),
                slots: Vec::new(),
            });
            if ch.ics.last() != Some(&r.ic) {
                ch.ics.push(r.ic);
                ch.slots.push(local(r.ic).unwrap());
            }
        }
    }
    let ghost_ics: Vec<u64> = ghosts.into_keys().collect();
    let ghost_slot: BTreeMap<u64, usize> = ghost_ics
        .iter()
        .enumerate()
        .map(|(g, &ic)| (ic, owned + g))
        .collect();
    let mut recv: BTreeMap<usize, Channel> = BTreeMap::new();
    for &ic in &ghost_ics {
        let peer = assignment.partition_of(ic);
        let ch = recv.entry(peer).or_insert_with(|| Channel {
            peer,
            ics: Vec::new(),
            slots: Vec::new(),
        });
        ch.ics.push(ic);
        ch.slots.push(ghost_slot[&ic]);
    }

    let slots = owned + ghost_ics.len();
    let mut pull = vec![0usize; Q * owned];
    for (c, r) in records.iter().enumerate() {
        pull[c] = c;
        for d in 0..DIRECTIONS {
            let q = d + 1;
            // Population q arrives from the cell at x - c_q.
            let from = r.nbr[opposite(d)];
            pull[q * owned + c] = if from == 0 {
                opposite_population(q) * slots + c
            } else {
                let slot = local(from).unwrap_or_else(|| ghost_slot[&from]);
                q * slots + slot
            };
        }
    }

    Ok(LocalDomain {
        part,
        range,
        coords: records.iter().map(|r| r.coord).collect(),
        ghost_ics,
        pull,
        src: vec![0.0; Q * slots],
        dst: vec![0.0; Q * slots],
        send: send.into_values().collect(),
        recv: recv.into_values().collect(),
    })
}

/// Read chunk `n` of `parts` equal chunks and localize it.
pub fn load_and_localize(path: impl AsRef<Path>, n: u64, parts: u64) -> Result<LocalDomain> {
    let path = path.as_ref();
    let (header, _) = open_sparse(path)?;
    let assignment = chunk_ranges(header.fluid_cells, parts)?;
    if n >= parts {
        return Err(Error::Parameter(format!("partition {n} of {parts}")));
    }
    let (_, records) = read_ic_range(path, assignment.range(n as usize))?;
    localize(&records, &assignment, n as usize)
}

/// Per-cell macroscopic values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellState {
    pub coord: [u32; 3],
    pub ic: u64,
    pub rho: f64,
    pub u: [f64; 3],
}

impl LocalDomain {
    pub fn part(&self) -> usize {
        self.part
    }

    pub fn ic_range(&self) -> Range<u64> {
        self.range.clone()
    }

    pub fn owned(&self) -> usize {
        self.coords.len()
    }

    pub fn slots(&self) -> usize {
        self.owned() + self.ghost_ics.len()
    }

    pub fn coords(&self) -> &[[u32; 3]] {
        &self.coords
    }

    pub fn ghost_ics(&self) -> &[u64] {
        &self.ghost_ics
    }

    pub fn send_plan(&self) -> &[Channel] {
        &self.send
    }

    pub fn recv_plan(&self) -> &[Channel] {
        &self.recv
    }

    /// Flat source index of population `q` for owned cell `c`.
    pub fn pull_source(&self, q: usize, c: usize) -> usize {
        self.pull[q * self.owned() + c]
    }

    #[inline]
    pub fn population(&self, q: usize, slot: usize) -> f64 {
        self.src[q * self.slots() + slot]
    }

    /// All populations of owned cell `c`.
    pub fn cell(&self, c: usize) -> [f64; Q] {
        std::array::from_fn(|q| self.population(q, c))
    }

    pub fn set_cell(&mut self, slot: usize, f: [f64; Q]) {
        let slots = self.slots();
        for (q, v) in f.into_iter().enumerate() {
            self.src[q * slots + slot] = v;
        }
    }

    /// Set every slot, ghosts included, to the same equilibrium.
    pub fn init_equilibrium(&mut self, rho0: f64, u0: [f64; 3]) -> Result<()> {
        check_density(rho0)?;
        let feq = equilibrium(rho0, u0);
        for slot in 0..self.slots() {
            self.set_cell(slot, feq);
        }
        Ok(())
    }

    pub fn mass(&self) -> f64 {
        let owned = self.owned();
        self.src
            .chunks(self.slots())
            .map(|pop| pop[..owned].iter().sum::<f64>())
            .sum()
    }

    /// Momentum summed over owned cells, without the half-force shift.
    pub fn momentum(&self) -> [f64; 3] {
        let mut j = [0.0; 3];
        for c in 0..self.owned() {
            let f = self.cell(c);
            for (q, fq) in f.iter().enumerate() {
                for a in 0..3 {
                    j[a] += VELOCITIES[q][a] as f64 * fq;
                }
            }
        }
        j
    }

    pub fn macroscopic(&self, force: [f64; 3]) -> Vec<CellState> {
        (0..self.owned())
            .map(|c| {
                let f = self.cell(c);
                let rho: f64 = f.iter().sum();
                let mut j = [0.0; 3];
                for (q, fq) in f.iter().enumerate() {
                    for a in 0..3 {
                        j[a] += VELOCITIES[q][a] as f64 * fq;
                    }
                }
                CellState {
                    coord: self.coords[c],
                    ic: self.range.start + c as u64,
                    rho,
                    u: std::array::from_fn(|a| (j[a] + 0.5 * force[a]) / rho),
                }
            })
            .collect()
    }

    /// One fused pull, collide and force update of all owned cells from the
    /// source into the destination array, then swap. Returns `false` if a
    /// non-finite population appeared.
    pub fn step(&mut self, params: &TrtParams, exec: Execution) -> bool {
        let owned = self.owned();
        let slots = self.slots();
        let omega_p = 1.0 / params.tau_plus;
        let omega_m = 1.0 / params.tau_minus();
        let g = params.force;
        let src = &self.src;
        let pull = &self.pull;

        let mut blocks: Vec<(usize, Vec<&mut [f64]>)> = (0..owned.div_ceil(CELL_BLOCK))
            .map(|b| (b * CELL_BLOCK, Vec::with_capacity(Q)))
            .collect();
        for pop in self.dst.chunks_mut(slots) {
            for (b, part) in pop[..owned].chunks_mut(CELL_BLOCK).enumerate() {
                blocks[b].1.push(part);
            }
        }

        let finite = exec.map_mut(&mut blocks, |(start, out)| {
            let mut sum = 0.0;
            for k in 0..out[0].len() {
                let c = *start + k;
                let f: [f64; Q] = std::array::from_fn(|q| src[pull[q * owned + c]]);
                let post = collide(&f, omega_p, omega_m, g);
                for (pop, v) in out.iter_mut().zip(post) {
                    pop[k] = v;
                    sum += v;
                }
            }
            // NaN or infinity anywhere in the block poisons the sum.
            sum.is_finite()
        });
        std::mem::swap(&mut self.src, &mut self.dst);
        finite.into_iter().all(|ok| ok)
    }
}

fn check_density(rho0: f64) -> Result<()> {
    if rho0 > 0.0 && rho0.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "initial density must be positive, got {rho0}"
        )))
    }
}

/// TRT collision plus body force for one cell.
#[inline]
fn collide(f: &[f64; Q], omega_p: f64, omega_m: f64, g: [f64; 3]) -> [f64; Q] {
    let rho: f64 = f.iter().sum();
    let mut j = [0.0; 3];
    for q in 1..Q {
        let c = VELOCITIES[q];
        j[0] += c[0] as f64 * f[q];
        j[1] += c[1] as f64 * f[q];
        j[2] += c[2] as f64 * f[q];
    }
    let u = [j[0] / rho, j[1] / rho, j[2] / rho];
    let usq = 1.5 * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);

    let mut out = [0.0; Q];
    out[0] = f[0] - omega_p * (f[0] - WEIGHTS[0] * rho * (1.0 - usq));
    // Directions come in opposite pairs (q, q + 1) for odd q.
    for q in (1..Q).step_by(2) {
        let o = q + 1;
        let c = VELOCITIES[q];
        let cu = c[0] as f64 * u[0] + c[1] as f64 * u[1] + c[2] as f64 * u[2];
        let cg = c[0] as f64 * g[0] + c[1] as f64 * g[1] + c[2] as f64 * g[2];
        let w = WEIGHTS[q];
        let eq_even = w * rho * (1.0 + 4.5 * cu * cu - usq);
        let eq_odd = w * rho * 3.0 * cu;
        let even = 0.5 * (f[q] + f[o]);
        let odd = 0.5 * (f[q] - f[o]);
        let relax_even = omega_p * (even - eq_even);
        let relax_odd = omega_m * (odd - eq_odd);
        let force = 3.0 * w * cg * rho;
        out[q] = f[q] - relax_even - relax_odd + force;
        out[o] = f[o] - relax_even + relax_odd - force;
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PartitionTiming {
    pub compute: Duration,
    pub exchange: Duration,
}

/// Messages of one partition: peer and packed populations.
type Outbox = Vec<(usize, Vec<f64>)>;

/// All partitions of one run, advanced in lock step.
#[derive(Clone, Debug)]
pub struct Simulation {
    header: SparseHeader,
    assignment: PartitionAssignment,
    params: TrtParams,
    domains: Vec<LocalDomain>,
    steps_done: u64,
    timings: Vec<PartitionTiming>,
    exec: Execution,
}

impl Simulation {
    /// Partition in-memory records (sorted by index) and set up the domains.
    pub fn from_records(
        header: SparseHeader,
        records: &[SparseRecord],
        assignment: PartitionAssignment,
        params: TrtParams,
        exec: Execution,
    ) -> Result<Self> {
        if assignment.fluid_cells() != header.fluid_cells
            || records.len() as u64 != header.fluid_cells
        {
            return Err(Error::Data(format!(
                "{} records and a partitioning of {} cells for N_f = {}",
                records.len(),
                assignment.fluid_cells(),
                header.fluid_cells
            )));
        }
        let domains = exec
            .map_range(0..assignment.parts(), |p| {
                let r = assignment.range(p);
                localize(
                    &records[(r.start - 1) as usize..(r.end - 1) as usize],
                    &assignment,
                    p,
                )
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Self::new(header, assignment, domains, params, exec)
    }

    /// Load a sparse file split into `parts` equal chunks, or along the
    /// partition table stored in the file when `parts` is `None`.
    pub fn load(
        path: impl AsRef<Path>,
        parts: Option<u64>,
        params: TrtParams,
        exec: Execution,
    ) -> Result<Self> {
        let path = path.as_ref();
        let (header, _) = open_sparse(path)?;
        let assignment = match parts {
            Some(n) => chunk_ranges(header.fluid_cells, n)?,
            None => header.partition_table().ok_or_else(|| {
                Error::Parameter("file has no partition table; give a partition count".into())
            })??,
        };
        let domains = exec
            .map_range(0..assignment.parts(), |p| {
                let (_, records) = read_ic_range(path, assignment.range(p))?;
                localize(&records, &assignment, p)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Self::new(header, assignment, domains, params, exec)
    }

    fn new(
        header: SparseHeader,
        assignment: PartitionAssignment,
        domains: Vec<LocalDomain>,
        params: TrtParams,
        exec: Execution,
    ) -> Result<Self> {
        params.validate()?;
        // Every receive list must be mirrored by the owner's send list.
        for d in &domains {
            for ch in d.recv_plan() {
                let mirror = domains[ch.peer]
                    .send_plan()
                    .iter()
                    .find(|s| s.peer == d.part);
                if mirror.map(|s| &s.ics) != Some(&ch.ics) {
                    return Err(Error::Consistency(format!(
                        "partition {} expects cells from {} that are not sent (asymmetric adjacency)",
                        d.part, ch.peer
                    )));
                }
            }
            for ch in d.send_plan() {
                if !domains[ch.peer]
                    .recv_plan()
                    .iter()
                    .any(|r| r.peer == d.part)
                {
                    return Err(Error::Consistency(format!(
                        "partition {} sends cells to {} that it never reads",
                        d.part, ch.peer
                    )));
                }
            }
        }
        let parts = domains.len();
        Ok(Simulation {
            header,
            assignment,
            params,
            domains,
            steps_done: 0,
            timings: vec![PartitionTiming::default(); parts],
            exec,
        })
    }

    pub fn header(&self) -> &SparseHeader {
        &self.header
    }

    pub fn assignment(&self) -> &PartitionAssignment {
        &self.assignment
    }

    pub fn params(&self) -> &TrtParams {
        &self.params
    }

    pub fn domains(&self) -> &[LocalDomain] {
        &self.domains
    }

    pub fn steps_done(&self) -> u64 {
        self.steps_done
    }

    pub fn timings(&self) -> &[PartitionTiming] {
        &self.timings
    }

    pub fn fluid_cells(&self) -> u64 {
        self.header.fluid_cells
    }

    pub fn init_equilibrium(&mut self, rho0: f64, u0: [f64; 3]) -> Result<()> {
        self.init_with(|_| (rho0, u0))
    }

    /// Initialize every cell to the equilibrium of `state(coord)`.
    pub fn init_with(&mut self, state: impl Fn([u32; 3]) -> (f64, [f64; 3]) + Sync) -> Result<()> {
        for d in &mut self.domains {
            for c in 0..d.owned() {
                let (rho, u) = state(d.coords[c]);
                check_density(rho)?;
                d.set_cell(c, equilibrium(rho, u));
            }
        }
        self.exchange()?;
        self.steps_done = 0;
        self.timings.fill(PartitionTiming::default());
        Ok(())
    }

    /// Copy the owners' populations into every ghost slot.
    fn exchange(&mut self) -> Result<()> {
        let domains = &self.domains;
        let outgoing: Vec<(Outbox, Duration)> = self.exec.map(domains, |d| {
            let t = Instant::now();
            let slots = d.slots();
            let msgs = d
                .send
                .iter()
                .map(|ch| {
                    let mut buf = Vec::with_capacity(Q * ch.slots.len());
                    for &s in &ch.slots {
                        buf.extend((0..Q).map(|q| d.src[q * slots + s]));
                    }
                    (ch.peer, buf)
                })
                .collect();
            (msgs, t.elapsed())
        });
        let mut inbox: Vec<BTreeMap<usize, Vec<f64>>> = vec![BTreeMap::new(); domains.len()];
        for (from, (msgs, elapsed)) in outgoing.into_iter().enumerate() {
            self.timings[from].exchange += elapsed;
            for (to, buf) in msgs {
                inbox[to].insert(from, buf);
            }
        }
        let mut work: Vec<_> = self.domains.iter_mut().zip(inbox).collect();
        let unpacked = self.exec.map_mut(&mut work, |(d, inbox)| {
            let t = Instant::now();
            d.unpack(inbox).map(|_| t.elapsed())
        });
        for (p, r) in unpacked.into_iter().enumerate() {
            self.timings[p].exchange += r?;
        }
        Ok(())
    }

    /// Advance all partitions by one step.
    pub fn step(&mut self) -> Result<()> {
        let params = self.params;
        let exec = self.exec;
        let outcome = exec.map_mut(&mut self.domains, |d| {
            let t = Instant::now();
            let ok = d.step(&params, exec);
            (ok, t.elapsed())
        });
        self.steps_done += 1;
        for (p, (ok, elapsed)) in outcome.iter().enumerate() {
            self.timings[p].compute += *elapsed;
            if !ok {
                return Err(Error::Divergence {
                    step: self.steps_done,
                });
            }
        }
        self.exchange()
    }

    pub fn run(&mut self, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn mass(&self) -> f64 {
        self.domains.iter().map(LocalDomain::mass).sum()
    }

    pub fn momentum(&self) -> [f64; 3] {
        self.domains.iter().fold([0.0; 3], |acc, d| {
            let m = d.momentum();
            std::array::from_fn(|a| acc[a] + m[a])
        })
    }

    /// Populations of all fluid cells in index order.
    pub fn pdf_state(&self) -> Vec<[f64; Q]> {
        self.domains
            .iter()
            .flat_map(|d| (0..d.owned()).map(move |c| d.cell(c)))
            .collect()
    }

    /// Macroscopic values of all fluid cells in index order.
    pub fn macroscopic(&self) -> Vec<CellState> {
        self.domains
            .iter()
            .flat_map(|d| d.macroscopic(self.params.force))
            .collect()
    }
}

impl LocalDomain {
    fn unpack(&mut self, inbox: &BTreeMap<usize, Vec<f64>>) -> Result<()> {
        let slots = self.slots();
        for ch in &self.recv {
            let buf = inbox.get(&ch.peer).ok_or_else(|| {
                Error::Protocol(format!(
                    "partition {} got no ghost data from {}",
                    self.part, ch.peer
                ))
            })?;
            if buf.len() != Q * ch.slots.len() {
                return Err(Error::Protocol(format!(
                    "partition {} expected {} ghost cells from {}, got {} values",
                    self.part,
                    ch.slots.len(),
                    ch.peer,
                    buf.len()
                )));
            }
            for (k, &s) in ch.slots.iter().enumerate() {
                for q in 0..Q {
                    self.src[q * slots + s] = buf[k * Q + q];
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub partitions: usize,
    pub steps: u64,
    pub fluid_cells: u64,
    pub seconds: f64,
    /// Fluid cell updates performed, `N_f * steps`.
    pub flup_count: u64,
    /// Updates per second.
    pub flups: f64,
    pub gflops_est: f64,
    pub per_partition: Vec<PartitionTiming>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "partitions,steps,fluid_cells,seconds,flups,gflops_est";

    pub fn new(
        partitions: usize,
        steps: u64,
        fluid_cells: u64,
        seconds: f64,
        per_partition: Vec<PartitionTiming>,
    ) -> Self {
        let flup_count = fluid_cells * steps;
        let flups = if seconds > 0.0 {
            flup_count as f64 / seconds
        } else {
            0.0
        };
        BenchReport {
            partitions,
            steps,
            fluid_cells,
            seconds,
            flup_count,
            flups,
            gflops_est: flups * FLOPS_PER_UPDATE / 1e9,
            per_partition,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6e},{:.6}",
            self.partitions,
            self.steps,
            self.fluid_cells,
            self.seconds,
            self.flups,
            self.gflops_est
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        writeln!(w, "{}", self.csv_row())
    }
}

/// Run `warmup` untimed and then `steps` timed steps.
pub fn run_benchmark(sim: &mut Simulation, steps: u64, warmup: u64) -> Result<BenchReport> {
    if steps == 0 {
        return Err(Error::Parameter("benchmark needs at least one step".into()));
    }
    sim.run(warmup)?;
    sim.timings.fill(PartitionTiming::default());
    let t = Instant::now();
    sim.run(steps)?;
    let seconds = t.elapsed().as_secs_f64();
    Ok(BenchReport::new(
        sim.domains.len(),
        steps,
        sim.fluid_cells(),
        seconds,
        sim.timings.clone(),
    ))
}

/// Mean `u_x` per `y` row over the fluid cells.
pub fn velocity_profile(sim: &Simulation) -> Vec<Option<f64>> {
    let ny = sim.header.dims[1] as usize;
    let mut sum = vec![0.0; ny];
    let mut count = vec![0usize; ny];
    for s in sim.macroscopic() {
        let y = s.coord[1] as usize;
        sum[y] += s.u[0];
        count[y] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &n)| (n > 0).then(|| s / n as f64))
        .collect()
}

/// Analytic plate-channel profile with walls half a cell outside the
/// first and last fluid rows.
pub fn poiseuille_analytic(y: usize, ny: usize, g: f64, nu: f64) -> f64 {
    let l = ny as f64 - 2.0;
    let yh = y as f64 - 0.5;
    g * yh * (l - yh) / (2.0 * nu)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoiseuilleReport {
    pub error: f64,
    pub steps: u64,
    pub residual: f64,
    /// Largest relative change of total mass over a single step.
    pub max_mass_drift: f64,
}

/// Run a plate channel to steady state and compare `u_x` with the analytic
/// profile. Convergence is checked every 100 steps on the maximum relative
/// change of the profile.
pub fn poiseuille_error(
    sim: &mut Simulation,
    tol: f64,
    max_steps: u64,
) -> Result<PoiseuilleReport> {
    const CHECK: u64 = 100;
    let g = sim.params.force[0];
    let nu = sim.params.viscosity();
    let ny = sim.header.dims[1] as usize;
    let mut prev = velocity_profile(sim);
    let mut mass = sim.mass();
    let mut drift: f64 = 0.0;
    let mut residual = f64::INFINITY;
    while sim.steps_done < max_steps {
        for _ in 0..CHECK {
            sim.step()?;
            let m = sim.mass();
            drift = drift.max(((m - mass) / mass).abs());
            mass = m;
        }
        let cur = velocity_profile(sim);
        let scale = cur.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        let change = cur
            .iter()
            .zip(&prev)
            .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).abs()))
            .fold(0.0f64, f64::max);
        residual = if scale > 0.0 { change / scale } else { change };
        prev = cur;
        if residual < tol {
            let (mut num, mut den) = (0.0, 0.0);
            for (y, u) in prev.iter().enumerate() {
                if let Some(u) = u {
                    let exact = poiseuille_analytic(y, ny, g, nu);
                    num += (u - exact).powi(2);
                    den += exact * exact;
                }
            }
            let error = if den > 0.0 {
                (num / den).sqrt()
            } else {
                num.sqrt()
            };
            return Ok(PoiseuilleReport {
                error,
                steps: sim.steps_done,
                residual,
                max_mass_drift: drift,
            });
        }
    }
    Err(Error::NotConverged { residual })
}
