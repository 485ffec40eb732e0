//! Deterministic synthetic city and trip generator with a known gravity-type
//! diurnal intensity process.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geodata::{build_distance_matrix, parse_timestamp, LatLon, Region, TripRecord};

const KM_PER_DEG: f64 = 111.195;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Archetype {
    pub name: String,
    /// Share of regions of this archetype.
    pub weight: f64,
    /// Probability over attribute indices.
    pub attribute_probs: Vec<f64>,
    #[serde(default = "default_attrs_per_region")]
    pub attributes_per_region: usize,
}

fn default_attrs_per_region() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationLaw {
    /// Mean of `ln(population)`.
    pub log_mean: f64,
    /// Standard deviation of `ln(population)`.
    pub log_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CitySpec {
    pub seed: u64,
    pub n_regions: usize,
    pub grid_side: usize,
    #[serde(default = "default_cell_km")]
    pub cell_km: f64,
    #[serde(default = "default_anchor")]
    pub anchor: LatLon,
    pub attributes: Vec<String>,
    pub archetypes: Vec<Archetype>,
    pub population: PopulationLaw,
}

fn default_cell_km() -> f64 {
    1.5
}

fn default_anchor() -> LatLon {
    LatLon { lat: 40.70, lon: -74.00 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub origin: String,
    pub destination: String,
    pub hourly: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub base_rate: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Hourly multiplier for archetype pairs without an explicit profile.
    pub default_profile: Vec<f64>,
    pub profiles: Vec<Profile>,
    /// Optional profiles used on Saturdays and Sundays.
    #[serde(default)]
    pub weekend_profiles: Option<Vec<Profile>>,
    #[serde(default)]
    pub weekend_default_profile: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub city: CitySpec,
    pub process: ProcessSpec,
    pub days: usize,
    /// First instant, UTC.
    #[serde(default = "default_start")]
    pub start: String,
    #[serde(default = "default_tau")]
    pub tau: i64,
}

fn default_start() -> String {
    "2024-01-01T00:00:00Z".to_string()
}

fn default_tau() -> i64 {
    3600
}

fn check_profile(what: &str, p: &[f64]) -> Result<()> {
    if p.len() != 24 {
        return Err(Error::Config(format!("{what}: expected 24 hourly values, got {}", p.len())));
    }
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Config(format!("{what}: hourly values must be finite and nonnegative")));
    }
    Ok(())
}

impl CitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions == 0 {
            return Err(Error::Config("city.n_regions: must be at least 1".into()));
        }
        if self.n_regions > self.grid_side * self.grid_side {
            return Err(Error::Config(format!(
                "city.n_regions: {} regions do not fit a {}x{} grid",
                self.n_regions, self.grid_side, self.grid_side
            )));
        }
        if !(self.cell_km > 0.0) {
            return Err(Error::Config("city.cell_km: must be positive".into()));
        }
        if self.attributes.is_empty() {
            return Err(Error::Config("city.attributes: vocabulary is empty".into()));
        }
        if self.archetypes.is_empty() {
            return Err(Error::Config("city.archetypes: at least one archetype required".into()));
        }
        let total: f64 = self.archetypes.iter().map(|a| a.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.archetypes.iter().any(|a| a.weight < 0.0) {
            return Err(Error::Config(format!("city.archetypes: weights must be nonnegative and sum to 1, got {total}")));
        }
        for (k, a) in self.archetypes.iter().enumerate() {
            if a.attribute_probs.len() != self.attributes.len() {
                return Err(Error::Config(format!(
                    "city.archetypes[{k}].attribute_probs: expected {} entries",
                    self.attributes.len()
                )));
            }
            let s: f64 = a.attribute_probs.iter().sum();
            if (s - 1.0).abs() > 1e-9 || a.attribute_probs.iter().any(|p| *p < 0.0) {
                return Err(Error::Config(format!("city.archetypes[{k}].attribute_probs: must sum to 1, got {s}")));
            }
            let support = a.attribute_probs.iter().filter(|p| **p > 0.0).count();
            if a.attributes_per_region == 0 || a.attributes_per_region > support {
                return Err(Error::Config(format!(
                    "city.archetypes[{k}].attributes_per_region: must be in 1..={support}"
                )));
            }
        }
        if !(self.population.log_sd > 0.0) || !self.population.log_mean.is_finite() {
            return Err(Error::Config("city.population: log_sd must be positive and log_mean finite".into()));
        }
        Ok(())
    }

    fn archetype_index(&self, name: &str, what: &str) -> Result<usize> {
        self.archetypes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::Config(format!("{what}: unknown archetype {name:?}")))
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.city.validate()?;
        let p = &self.process;
        if !(p.base_rate >= 0.0) || !p.a.is_finite() || !p.b.is_finite() || !p.c.is_finite() {
            return Err(Error::Config("process: base_rate must be nonnegative and exponents finite".into()));
        }
        check_profile("process.default_profile", &p.default_profile)?;
        for (k, pr) in p.profiles.iter().enumerate() {
            check_profile(&format!("process.profiles[{k}].hourly"), &pr.hourly)?;
            self.city.archetype_index(&pr.origin, &format!("process.profiles[{k}].origin"))?;
            self.city.archetype_index(&pr.destination, &format!("process.profiles[{k}].destination"))?;
        }
        if let Some(w) = &p.weekend_profiles {
            for (k, pr) in w.iter().enumerate() {
                check_profile(&format!("process.weekend_profiles[{k}].hourly"), &pr.hourly)?;
                self.city.archetype_index(&pr.origin, &format!("process.weekend_profiles[{k}].origin"))?;
                self.city.archetype_index(&pr.destination, &format!("process.weekend_profiles[{k}].destination"))?;
            }
        }
        if let Some(w) = &p.weekend_default_profile {
            check_profile("process.weekend_default_profile", w)?;
        }
        if self.days == 0 {
            return Err(Error::Config("days: must be at least 1".into()));
        }
        if self.tau <= 0 || 86_400 % self.tau != 0 {
            return Err(Error::Config("tau: must be a positive divisor of 86400".into()));
        }
        if parse_timestamp(&self.start).is_none() {
            return Err(Error::Config(format!("start: cannot parse {:?}", self.start)));
        }
        Ok(())
    }

    pub fn start_timestamp(&self) -> i64 {
        parse_timestamp(&self.start).unwrap_or(0)
    }

    /// Ten-region, fourteen-day city starting on a Saturday, with a commuting weekday and a leisure weekend.
    pub fn demo(seed: u64) -> Self {
        let attributes: Vec<String> =
            ["housing", "school", "office", "bank", "restaurant", "cafe", "park", "cinema"].map(String::from).to_vec();
        let arch = |name: &str, weight: f64, probs: [f64; 8]| Archetype {
            name: name.to_string(),
            weight,
            attribute_probs: probs.to_vec(),
            attributes_per_region: 2,
        };
        let archetypes = vec![
            arch("residential", 0.4, [0.5, 0.3, 0.0, 0.0, 0.0, 0.1, 0.1, 0.0]),
            arch("office", 0.3, [0.0, 0.0, 0.55, 0.3, 0.0, 0.15, 0.0, 0.0]),
            arch("restaurant", 0.1, [0.0, 0.0, 0.0, 0.0, 0.6, 0.4, 0.0, 0.0]),
            arch("recreation", 0.2, [0.0, 0.0, 0.0, 0.0, 0.1, 0.0, 0.5, 0.4]),
        ];
        let hours = |f: &dyn Fn(usize) -> f64| (0..24).map(f).collect::<Vec<f64>>();
        let bump = |h: usize, lo: usize, hi: usize, v: f64| if (lo..=hi).contains(&h) { v } else { 0.0 };
        let base = |h: usize| if (6..=22).contains(&h) { 0.3 } else { 0.05 };
        let prof = |o: &str, d: &str, hourly: Vec<f64>| Profile { origin: o.into(), destination: d.into(), hourly };
        let profiles = vec![
            prof("residential", "office", hours(&|h| base(h) + bump(h, 7, 9, 4.0))),
            prof("office", "residential", hours(&|h| base(h) + bump(h, 17, 19, 4.0))),
            prof("office", "restaurant", hours(&|h| base(h) + bump(h, 12, 13, 3.0))),
            prof("restaurant", "office", hours(&|h| base(h) + bump(h, 13, 14, 3.0))),
            prof("residential", "recreation", hours(&|h| base(h) + bump(h, 19, 21, 1.5))),
            prof("recreation", "residential", hours(&|h| base(h) + bump(h, 21, 23, 1.5))),
        ];
        let weekend = vec![
            prof("residential", "office", hours(&|h| 0.1 * base(h))),
            prof("office", "residential", hours(&|h| 0.1 * base(h))),
            prof("office", "restaurant", hours(&|h| 0.1 * base(h))),
            prof("restaurant", "office", hours(&|h| 0.1 * base(h))),
            prof("residential", "recreation", hours(&|h| base(h) + bump(h, 10, 17, 4.0))),
            prof("recreation", "residential", hours(&|h| base(h) + bump(h, 13, 20, 4.0))),
            prof("residential", "restaurant", hours(&|h| base(h) + bump(h, 11, 14, 3.0))),
            prof("restaurant", "residential", hours(&|h| base(h) + bump(h, 13, 16, 3.0))),
        ];
        SynthSpec {
            city: CitySpec {
                seed,
                n_regions: 10,
                grid_side: 4,
                cell_km: 1.5,
                anchor: default_anchor(),
                attributes,
                archetypes,
                population: PopulationLaw { log_mean: 8.0, log_sd: 0.5 },
            },
            process: ProcessSpec {
                base_rate: 0.01,
                a: 0.5,
                b: 0.5,
                c: 1.0,
                default_profile: hours(&base),
                profiles,
                weekend_profiles: Some(weekend),
                weekend_default_profile: Some(hours(&base)),
            },
            days: 14,
            start: "2024-01-06T00:00:00Z".to_string(),
            tau: 3600,
        }
    }
}

/// Generated city: region table plus per-region archetype.
#[derive(Clone, Debug, PartialEq)]
pub struct City {
    pub regions: Vec<Region>,
    pub archetypes: Vec<usize>,
    pub vocab: Vec<String>,
}

impl City {
    pub fn populations(&self) -> Vec<f64> {
        self.regions.iter().map(|r| r.population).collect()
    }

    pub fn distances(&self) -> Tensor {
        build_distance_matrix(&self.regions)
    }
}

/// Stream keyed by the root seed and a label.
pub fn named_stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// Largest-remainder quota of each archetype, then shuffled over regions.
fn assign_archetypes(spec: &CitySpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = spec.n_regions;
    let raw: Vec<f64> = spec.archetypes.iter().map(|a| a.weight * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&x, &y| (raw[y] - raw[y].floor()).partial_cmp(&(raw[x] - raw[x].floor())).unwrap().then(x.cmp(&y)));
    let mut missing = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[k] += 1;
        missing -= 1;
    }
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
    labels.shuffle(rng);
    labels
}

fn draw_attributes(probs: &[f64], count: usize, rng: &mut ChaCha8Rng) -> BTreeSet<usize> {
    let mut weights = probs.to_vec();
    let mut chosen = BTreeSet::new();
    while chosen.len() < count {
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = weights.iter().rposition(|w| *w > 0.0).expect("support checked");
        for (k, w) in weights.iter().enumerate() {
            if *w > 0.0 && u < *w {
                pick = k;
                break;
            }
            u -= w;
        }
        chosen.insert(pick);
        weights[pick] = 0.0;
    }
    chosen
}

/// Lognormal quantile at stratified uniforms, one per region.
fn stratified_populations(law: &PopulationLaw, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(law.log_mean, law.log_sd).expect("validated law");
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(rng);
    strata
        .into_iter()
        .map(|k| {
            let u = (k as f64 + rng.gen_range(0.0..1.0)) / n as f64;
            let u = u.clamp(1e-12, 1.0 - 1e-12);
            normal.inverse_cdf(u).exp().round().max(1.0)
        })
        .collect()
}

pub fn generate_city(spec: &CitySpec) -> Result<City> {
    spec.validate()?;
    let mut rng = named_stream(spec.seed, "synth.city");
    let mut cells: Vec<usize> = (0..spec.grid_side * spec.grid_side).collect();
    cells.shuffle(&mut rng);
    cells.truncate(spec.n_regions);
    let archetypes = assign_archetypes(spec, &mut rng);
    let pops = stratified_populations(&spec.population, spec.n_regions, &mut rng);
    let cos_lat = spec.anchor.lat.to_radians().cos();
    let mut regions = Vec::with_capacity(spec.n_regions);
    for (id, &cell) in cells.iter().enumerate() {
        let gx = (cell % spec.grid_side) as f64 + rng.gen_range(-0.1..0.1);
        let gy = (cell / spec.grid_side) as f64 + rng.gen_range(-0.1..0.1);
        let lat = spec.anchor.lat + gy * spec.cell_km / KM_PER_DEG;
        let lon = spec.anchor.lon + gx * spec.cell_km / (KM_PER_DEG * cos_lat);
        let arch = &spec.archetypes[archetypes[id]];
        let attributes = draw_attributes(&arch.attribute_probs, arch.attributes_per_region, &mut rng);
        regions.push(Region { id, centroid: LatLon { lat, lon }, attributes, population: pops[id] });
    }
    Ok(City { regions, archetypes, vocab: spec.attributes.clone() })
}

/// Ground-truth hourly intensity for one day type.
#[derive(Clone, Debug, PartialEq)]
pub struct Intensity {
    /// `[day type][hour]` of `N x N` expected counts per hour (day type 0 weekday, 1 weekend).
    pub hourly: Vec<Vec<Tensor>>,
}

impl Intensity {
    pub fn at(&self, timestamp: i64, tau: i64) -> Tensor {
        let day = timestamp.div_euclid(86_400);
        let hour = (timestamp.rem_euclid(86_400) / 3600) as usize;
        // 1970-01-01 was a Thursday: weekday index 0 = Monday.
        let weekday = (day + 3).rem_euclid(7);
        let kind = if weekday >= 5 && self.hourly.len() > 1 { 1 } else { 0 };
        self.hourly[kind][hour].map(|v| v * tau as f64 / 3600.0)
    }
}

fn profile_table(spec: &SynthSpec, profiles: &[Profile], default: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
    let k = spec.city.archetypes.len();
    let mut table = vec![vec![default.to_vec(); k]; k];
    for p in profiles {
        let o = spec.city.archetype_index(&p.origin, "profile")?;
        let d = spec.city.archetype_index(&p.destination, "profile")?;
        table[o][d] = p.hourly.clone();
    }
    Ok(table)
}

pub fn intensity(spec: &SynthSpec, city: &City) -> Result<Intensity> {
    spec.validate()?;
    let p = &spec.process;
    let n = city.regions.len();
    let dist = city.distances();
    let pops = city.populations();
    let mut kinds = vec![profile_table(spec, &p.profiles, &p.default_profile)?];
    if p.weekend_profiles.is_some() || p.weekend_default_profile.is_some() {
        let default = p.weekend_default_profile.as_deref().unwrap_or(&p.default_profile);
        let profiles = p.weekend_profiles.as_deref().unwrap_or(&p.profiles);
        kinds.push(profile_table(spec, profiles, default)?);
    }
    let hourly = kinds
        .iter()
        .map(|table| {
            (0..24)
                .map(|h| {
                    let mut m = Tensor::zeros(&[n, n]);
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let d = dist.get(i, j).max(1e-3);
                            let g = p.base_rate * pops[i].powf(p.a) * pops[j].powf(p.b) * d.powf(-p.c);
                            m.set(i, j, g * table[city.archetypes[i]][city.archetypes[j]][h]);
                        }
                    }
                    m
                })
                .collect()
        })
        .collect();
    Ok(Intensity { hourly })
}

/// Poisson draw by sequential inversion; large means are split into chunks.
pub fn poisson<R: Rng>(lambda: f64, rng: &mut R) -> u64 {
    if !(lambda > 0.0) {
        return 0;
    }
    let chunks = (lambda / 500.0).ceil() as u64;
    let part = lambda / chunks as f64;
    (0..chunks)
        .map(|_| {
            let u: f64 = rng.gen();
            let mut k = 0u64;
            let mut p = (-part).exp();
            let mut cdf = p;
            while u > cdf && p > 0.0 {
                k += 1;
                p *= part / k as f64;
                cdf += p;
            }
            k
        })
        .sum()
}

/// Trips over `days` from `start`, one seeded stream per interval.
pub fn generate_trips(spec: &SynthSpec, city: &City, intensity: &Intensity) -> Vec<TripRecord> {
    let start = spec.start_timestamp();
    let n = city.regions.len();
    let per_day = 86_400 / spec.tau;
    let mut trips = Vec::new();
    for day in 0..spec.days as i64 {
        for slot in 0..per_day {
            let t0 = start + day * 86_400 + slot * spec.tau;
            let lam = intensity.at(t0, spec.tau);
            let mut rng = named_stream(spec.city.seed, &format!("synth.trips.{day}.{slot}"));
            for i in 0..n {
                for j in 0..n {
                    let count = poisson(lam.get(i, j), &mut rng);
                    for _ in 0..count {
                        let ts = t0 + rng.gen_range(0..spec.tau);
                        trips.push(TripRecord { origin: i, destination: j, timestamp: ts });
                    }
                }
            }
        }
    }
    trips
}

fn format_ts(ts: i64) -> String {
    chrono::DateTime::from_timestamp(ts, 0).expect("in range").format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn write_file<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
{
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSummary {
    pub regions: usize,
    pub attributes: usize,
    pub trips: usize,
    pub expected_trips: f64,
}

/// Writes `regions.csv`, `attributes.csv`, `attribute_vocab.csv`, `archetypes.csv`,
/// `trips.csv` and `ground_truth_intensity.csv` into `dir`.
pub fn write_all(spec: &SynthSpec, dir: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let city = generate_city(&spec.city)?;
    let inten = intensity(spec, &city)?;
    let trips = generate_trips(spec, &city, &inten);
    write_file(&dir.join("regions.csv"), |w| {
        writeln!(w, "id,lat,lon,population")?;
        for r in &city.regions {
            writeln!(w, "{},{:.6},{:.6},{}", r.id, r.centroid.lat, r.centroid.lon, r.population)?;
        }
        Ok(())
    })?;
    write_file(&dir.join("attributes.csv"), |w| {
        writeln!(w, "region_id,attribute_id")?;
        for r in &city.regions {
            for a in &r.attributes {
                writeln!(w, "{},{a}", r.id)?;
            }
        }
        Ok(())
    })?;
    write_file(&dir.join("attribute_vocab.csv"), |w| {
        writeln!(w, "attribute_id,name")?;
        for (k, name) in city.vocab.iter().enumerate() {
            writeln!(w, "{k},{name}")?;
        }
        Ok(())
    })?;
    write_file(&dir.join("archetypes.csv"), |w| {
        writeln!(w, "region_id,archetype")?;
        for (i, &a) in city.archetypes.iter().enumerate() {
            writeln!(w, "{i},{}", spec.city.archetypes[a].name)?;
        }
        Ok(())
    })?;
    write_file(&dir.join("trips.csv"), |w| {
        writeln!(w, "origin_id,dest_id,timestamp")?;
        for t in &trips {
            writeln!(w, "{},{},{}", t.origin, t.destination, format_ts(t.timestamp))?;
        }
        Ok(())
    })?;
    let n = city.regions.len();
    write_file(&dir.join("ground_truth_intensity.csv"), |w| {
        writeln!(w, "day_type,hour,origin_id,dest_id,intensity")?;
        for (kind, hours) in inten.hourly.iter().enumerate() {
            let label = if kind == 0 { "weekday" } else { "weekend" };
            for (h, m) in hours.iter().enumerate() {
                for i in 0..n {
                    for j in 0..n {
                        writeln!(w, "{label},{h},{i},{j},{:.17e}", m.get(i, j))?;
                    }
                }
            }
        }
        Ok(())
    })?;

    let start = spec.start_timestamp();
    let per_day = 86_400 / spec.tau;
    let expected_trips = (0..spec.days as i64 * per_day).map(|k| inten.at(start + k * spec.tau, spec.tau).sum()).sum();
    Ok(SynthSummary { regions: n, attributes: city.vocab.len(), trips: trips.len(), expected_trips })
}
