//! Counter-based random streams.
//!
//! Every draw in the crate comes from a Philox4x32-10 stream addressed by
//! `(master seed, domain, step, index)`. A particle's randomness at a given
//! filter step is therefore a pure function of its address, which makes the
//! filter output independent of how particles are scheduled across workers.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Philox4x32 with 10 rounds.
#[inline]
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut ctr = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let p0 = u64::from(PHILOX_M0) * u64::from(ctr[0]);
        let p1 = u64::from(PHILOX_M1) * u64::from(ctr[2]);
        ctr = [
            ((p1 >> 32) as u32) ^ ctr[1] ^ k[0],
            p1 as u32,
            ((p0 >> 32) as u32) ^ ctr[3] ^ k[1],
            p0 as u32,
        ];
    }
    ctr
}

/// Purpose tag mixed into the stream address so that different consumers of
/// the same master seed never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Domain {
    Prior = 1,
    Transition = 2,
    Resample = 3,
    Simulate = 4,
    BurnIn = 5,
    Forecast = 6,
    Optimizer = 7,
    Test = 8,
    Derive = 9,
}

/// A sequential stream of uniforms and normals at one address.
#[derive(Debug, Clone)]
pub struct Stream {
    key: [u32; 2],
    counter: [u32; 4],
    buffered: Option<f64>,
}

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

impl Stream {
    pub fn new(seed: u64, domain: Domain, step: u64, index: u64) -> Self {
        debug_assert!(
            step <= u64::from(u32::MAX),
            "step exceeds stream address space"
        );
        debug_assert!(
            index <= u64::from(u32::MAX),
            "index exceeds stream address space"
        );
        Self {
            key: [seed as u32, (seed >> 32) as u32],
            counter: [0, index as u32, step as u32, domain as u32],
            buffered: None,
        }
    }

    #[inline]
    fn next_block(&mut self) -> [u32; 4] {
        let out = philox4x32_10(self.counter, self.key);
        self.counter[0] = self.counter[0].wrapping_add(1);
        out
    }

    #[inline]
    fn to_unit(hi: u32, lo: u32) -> f64 {
        let bits = ((u64::from(hi) << 32) | u64::from(lo)) >> 11;
        (bits as f64 + 0.5) * TWO_POW_M53
    }

    /// Uniform on the open interval (0, 1) with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        if let Some(u) = self.buffered.take() {
            return u;
        }
        let b = self.next_block();
        self.buffered = Some(Self::to_unit(b[2], b[3]));
        Self::to_unit(b[0], b[1])
    }

    /// Standard normal draw by inversion.
    #[inline]
    pub fn normal(&mut self) -> f64 {
        inverse_normal_cdf(self.uniform())
    }

    /// Raw 64-bit output (used for seeding derived streams).
    pub fn next_u64(&mut self) -> u64 {
        let b = self.next_block();
        (u64::from(b[0]) << 32) | u64::from(b[1])
    }
}

/// Seed of the `index`-th independent replication under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    Stream::new(master, Domain::Derive, index >> 32, index & 0xffff_ffff).next_u64()
}

/// Inverse of the standard normal CDF (Wichura's AS241, about 1e-16
/// relative accuracy). `p` must lie in (0, 1).
#[allow(clippy::excessive_precision)]
pub fn inverse_normal_cdf(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
            + 6.726_577_092_700_870_1e4)
            * r
            + 4.592_195_393_154_987_1e4)
            * r
            + 1.373_169_376_550_946_1e4)
            * r
            + 1.971_590_950_306_551_4e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_6;
        let den = ((((((5.226_495_278_852_545_6e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271_1e4)
            * r
            + 2.121_379_430_158_659_6e4)
            * r
            + 5.394_196_021_424_751_1e3)
            * r
            + 6.871_870_074_920_579_1e2)
            * r
            + 4.231_333_070_160_091_1e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506_1e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_6)
            * r
            + 5.769_497_221_460_691_4)
            * r
            + 4.630_337_846_156_545_3)
            * r
            + 1.423_437_110_749_683_6;
        let den = ((((((1.050_750_071_644_416_8e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_7e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_8)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_3e-2)
            * r
            + 2.965_605_718_285_048_9e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114_4)
            * r
            + 6.657_904_643_501_103_8;
        let den = ((((((2.044_263_103_389_939_8e-15 * r + 1.421_511_758_316_445_9e-7) * r
            + 1.846_318_317_510_054_7e-5)
            * r
            + 7.868_691_311_456_132_6e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_879_4e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}
