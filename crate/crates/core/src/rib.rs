//! Server-side IP to ASN mapping via longest-prefix match.
//!
//! The routing table is loaded once from a flat `prefix/len ASN` text file
//! (the shape most MRT post-processors emit) and is immutable afterwards,
//! so lookups are safe to run from any number of threads.

use std::fmt;
use std::io::BufRead;
use std::net::IpAddr;

use thiserror::Error;

/// Autonomous system number. Zero is reserved and rejected on load.
pub type Asn = u32;

#[derive(Debug, Error)]
pub enum RibError {
    #[error("io error reading rib: {0}")]
    Io(#[from] std::io::Error),
    #[error("rib contains no valid entries")]
    EmptyRib,
    #[error("invalid prefix {text:?}: {reason}")]
    InvalidPrefix { text: String, reason: String },
}

/// An IP prefix with host bits below the prefix length zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Prefix {
    addr: IpAddr,
    len: u8,
}

impl Prefix {
    /// Builds a prefix, canonicalizing the address by masking host bits.
    pub fn new(addr: IpAddr, len: u8) -> Result<Prefix, RibError> {
        let max = match addr {
            IpAddr::V4(_) => 32,
            IpAddr::V6(_) => 128,
        };
        if len > max {
            return Err(RibError::InvalidPrefix {
                text: format!("{addr}/{len}"),
                reason: format!("length exceeds {max}"),
            });
        }
        let addr = match addr {
            IpAddr::V4(v4) => IpAddr::V4((u32::from(v4) & mask32(len)).into()),
            IpAddr::V6(v6) => IpAddr::V6((u128::from(v6) & mask128(len)).into()),
        };
        Ok(Prefix { addr, len })
    }

    /// Parses `addr/len` notation.
    pub fn parse(text: &str) -> Result<Prefix, RibError> {
        let invalid = |reason: &str| RibError::InvalidPrefix {
            text: text.to_string(),
            reason: reason.to_string(),
        };
        let (addr, len) = text
            .split_once('/')
            .ok_or_else(|| invalid("missing /len"))?;
        let addr: IpAddr = addr.parse().map_err(|_| invalid("bad address"))?;
        let len: u8 = len.parse().map_err(|_| invalid("bad length"))?;
        Prefix::new(addr, len)
    }

    pub fn addr(&self) -> IpAddr {
        self.addr
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u8 {
        self.len
    }

    /// True when `ip` falls inside this prefix. Families never mix.
    pub fn contains(&self, ip: IpAddr) -> bool {
        match (self.addr, ip) {
            (IpAddr::V4(net), IpAddr::V4(ip)) => u32::from(ip) & mask32(self.len) == u32::from(net),
            (IpAddr::V6(net), IpAddr::V6(ip)) => {
                u128::from(ip) & mask128(self.len) == u128::from(net)
            }
            _ => false,
        }
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.len)
    }
}

fn mask32(len: u8) -> u32 {
    match len {
        0 => 0,
        n => u32::MAX << (32 - n),
    }
}

fn mask128(len: u8) -> u128 {
    match len {
        0 => 0,
        n => u128::MAX << (128 - n),
    }
}

/// One rejected input line, reported by line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedLine {
    pub line: usize,
    pub text: String,
    pub reason: String,
}

/// Outcome summary of [`load_rib`] beyond the table itself.
#[derive(Debug, Default, Clone)]
pub struct RibLoadReport {
    pub entries: usize,
    pub malformed: Vec<MalformedLine>,
    pub duplicates: usize,
}

#[derive(Default)]
struct Node {
    child: [Option<Box<Node>>; 2],
    asn: Option<Asn>,
}

struct Trie {
    root: Node,
    width: u8,
}

impl Trie {
    fn new(width: u8) -> Trie {
        Trie {
            root: Node::default(),
            width,
        }
    }

    /// Returns true when the key was not present before.
    fn insert(&mut self, key: u128, len: u8, asn: Asn) -> bool {
        let mut node = &mut self.root;
        for i in 0..len {
            let bit = ((key >> (self.width - 1 - i)) & 1) as usize;
            node = node.child[bit].get_or_insert_with(Default::default);
        }
        let fresh = node.asn.is_none();
        node.asn = Some(asn);
        fresh
    }

    fn lookup(&self, key: u128) -> Option<Asn> {
        let mut node = &self.root;
        let mut best = node.asn;
        for i in 0..self.width {
            let bit = ((key >> (self.width - 1 - i)) & 1) as usize;
            match &node.child[bit] {
                Some(next) => {
                    node = next;
                    best = node.asn.or(best);
                }
                None => break,
            }
        }
        best
    }
}

/// Immutable longest-prefix-match table, one trie per address family.
pub struct RoutingInformationBase {
    v4: Trie,
    v6: Trie,
    len: usize,
}

impl fmt::Debug for RoutingInformationBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RoutingInformationBase")
            .field("len", &self.len)
            .finish_non_exhaustive()
    }
}

impl RoutingInformationBase {
    fn from_entries(entries: impl IntoIterator<Item = (Prefix, Asn)>) -> RoutingInformationBase {
        let mut rib = RoutingInformationBase {
            v4: Trie::new(32),
            v6: Trie::new(128),
            len: 0,
        };
        for (prefix, asn) in entries {
            let fresh = match prefix.addr {
                IpAddr::V4(a) => rib.v4.insert(u32::from(a) as u128, prefix.len, asn),
                IpAddr::V6(a) => rib.v6.insert(u128::from(a), prefix.len, asn),
            };
            if fresh {
                rib.len += 1;
            }
        }
        rib
    }

    /// Number of distinct prefixes held.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// ASN of the longest prefix covering `ip`, if any covers it.
    pub fn lookup(&self, ip: IpAddr) -> Option<Asn> {
        match ip {
            IpAddr::V4(a) => self.v4.lookup(u32::from(a) as u128),
            IpAddr::V6(a) => self.v6.lookup(u128::from(a)),
        }
    }
}

/// Loads a routing table from `prefix/len ASN` lines.
///
/// `#` starts a comment; blank lines are skipped. Malformed lines are
/// skipped and reported (never fatal); duplicate prefixes keep the last
/// occurrence. A file yielding zero valid entries is an error.
pub fn load_rib(input: impl BufRead) -> Result<(RoutingInformationBase, RibLoadReport), RibError> {
    let mut report = RibLoadReport::default();
    let mut entries: Vec<(Prefix, Asn)> = Vec::new();
    let mut seen = std::collections::BTreeMap::new();

    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let text = match line.split_once('#') {
            Some((before, _)) => before.trim(),
            None => line.trim(),
        };
        if text.is_empty() {
            continue;
        }
        let mut reject = |reason: String| {
            log::warn!("rib line {lineno} skipped: {reason}");
            report.malformed.push(MalformedLine {
                line: lineno,
                text: text.to_string(),
                reason,
            });
        };
        let mut fields = text.split_whitespace();
        let (prefix, asn) = match (fields.next(), fields.next(), fields.next()) {
            (Some(p), Some(a), None) => (p, a),
            _ => {
                reject("expected exactly `prefix/len asn`".into());
                continue;
            }
        };
        let prefix = match Prefix::parse(prefix) {
            Ok(p) => p,
            Err(e) => {
                reject(e.to_string());
                continue;
            }
        };
        let asn: Asn = match asn.parse() {
            Ok(0) | Err(_) => {
                reject(format!("bad asn {asn:?}"));
                continue;
            }
            Ok(a) => a,
        };
        if let Some(prev) = seen.insert(prefix, asn) {
            log::warn!("rib line {lineno}: duplicate {prefix}, {prev} replaced by {asn}");
            report.duplicates += 1;
        }
        entries.push((prefix, asn));
    }

    if seen.is_empty() {
        return Err(RibError::EmptyRib);
    }
    report.entries = seen.len();
    Ok((RoutingInformationBase::from_entries(entries), report))
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use proptest::prelude::*;

    use super::*;

    fn rib_of(text: &str) -> (RoutingInformationBase, RibLoadReport) {
        load_rib(Cursor::new(text)).unwrap()
    }

    /// Brute-force reference: longest covering prefix wins.
    fn oracle(entries: &[(Prefix, Asn)], ip: IpAddr) -> Option<Asn> {
        entries
            .iter()
            .filter(|(p, _)| p.contains(ip))
            .max_by_key(|(p, _)| p.len())
            .map(|&(_, asn)| asn)
    }

    #[test]
    fn default_route_matches_everything_v4() {
        let (rib, report) = rib_of("0.0.0.0/0 65000\n");
        assert_eq!(report.entries, 1);
        assert_eq!(rib.len(), 1);
        assert_eq!(rib.lookup("8.8.8.8".parse().unwrap()), Some(65000));
        assert_eq!(rib.lookup("2001:db8::1".parse().unwrap()), None);
    }

    #[test]
    fn duplicate_prefix_keeps_last() {
        let (rib, report) = rib_of("10.0.0.0/8 1\n10.0.0.0/8 2\n");
        assert_eq!(rib.len(), 1);
        assert_eq!(report.duplicates, 1);
        assert_eq!(rib.lookup("10.1.1.1".parse().unwrap()), Some(2));
    }

    #[test]
    fn longest_prefix_wins() {
        let (rib, _) = rib_of("10.0.0.0/8 1\n10.1.0.0/16 2\n");
        assert_eq!(rib.lookup("10.1.2.3".parse().unwrap()), Some(2));
        assert_eq!(rib.lookup("10.9.9.9".parse().unwrap()), Some(1));
        assert_eq!(rib.lookup("192.168.0.1".parse().unwrap()), None);
    }

    #[test]
    fn v6_lookup_works() {
        let (rib, _) = rib_of("2001:db8::/32 99\n2001:db8:1::/48 100\n");
        assert_eq!(rib.lookup("2001:db8::1".parse().unwrap()), Some(99));
        assert_eq!(rib.lookup("2001:db8:1::7".parse().unwrap()), Some(100));
        assert_eq!(rib.lookup("::1".parse().unwrap()), None);
    }

    #[test]
    fn host_bits_are_canonicalized() {
        let p = Prefix::parse("10.1.2.3/8").unwrap();
        assert_eq!(p.to_string(), "10.0.0.0/8");
        let (rib, _) = rib_of("10.1.2.3/8 5\n");
        assert_eq!(rib.lookup("10.255.0.1".parse().unwrap()), Some(5));
    }

    #[test]
    fn malformed_lines_are_skipped_with_line_numbers() {
        let (rib, report) = rib_of(
            "# full table\n\
             10.0.0.0/8 1\n\
             not a prefix 2\n\
             10.0.0.0/33 3\n\
             10.2.0.0/16 zero\n\
             10.3.0.0/16 0\n\
             \n\
             192.168.0.0/16 4 # campus\n",
        );
        assert_eq!(rib.len(), 2);
        let lines: Vec<usize> = report.malformed.iter().map(|m| m.line).collect();
        assert_eq!(lines, vec![3, 4, 5, 6]);
        assert_eq!(rib.lookup("192.168.7.7".parse().unwrap()), Some(4));
    }

    #[test]
    fn all_invalid_is_empty_rib() {
        match load_rib(Cursor::new("# nothing\nbogus\n")) {
            Err(RibError::EmptyRib) => {}
            other => panic!("expected EmptyRib, got {other:?}"),
        }
    }

    #[test]
    fn random_rib_matches_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let mut entries = std::collections::BTreeMap::new();
        while entries.len() < 1000 {
            let addr = IpAddr::from(rng.random::<[u8; 4]>());
            let len = rng.random_range(0..=32);
            let prefix = Prefix::new(addr, len).unwrap();
            entries.insert(prefix, rng.random_range(1..=65000u32));
        }
        let entries: Vec<(Prefix, Asn)> = entries.into_iter().collect();
        let text: String = entries.iter().map(|(p, a)| format!("{p} {a}\n")).collect();
        let (rib, _) = rib_of(&text);
        assert_eq!(rib.len(), 1000);
        for _ in 0..5000 {
            let ip = IpAddr::from(rng.random::<[u8; 4]>());
            assert_eq!(rib.lookup(ip), oracle(&entries, ip), "address {ip}");
        }
    }

    fn arb_prefix_v4() -> impl Strategy<Value = Prefix> {
        (any::<[u8; 4]>(), 0u8..=32).prop_map(|(o, len)| Prefix::new(IpAddr::from(o), len).unwrap())
    }

    fn arb_prefix_v6() -> impl Strategy<Value = Prefix> {
        (any::<[u8; 16]>(), 0u8..=128)
            .prop_map(|(o, len)| Prefix::new(IpAddr::from(o), len).unwrap())
    }

    proptest! {
        #[test]
        fn lookup_agrees_with_oracle_v4(
            prefixes in proptest::collection::btree_map(arb_prefix_v4(), 1u32..100000, 1..64),
            probes in proptest::collection::vec(any::<[u8; 4]>(), 1..64),
        ) {
            let entries: Vec<(Prefix, Asn)> = prefixes.into_iter().collect();
            let rib = RoutingInformationBase::from_entries(entries.iter().cloned());
            for octets in probes {
                let ip = IpAddr::from(octets);
                prop_assert_eq!(rib.lookup(ip), oracle(&entries, ip));
            }
        }

        #[test]
        fn lookup_agrees_with_oracle_v6(
            prefixes in proptest::collection::btree_map(arb_prefix_v6(), 1u32..100000, 1..64),
            probes in proptest::collection::vec(any::<[u8; 16]>(), 1..64),
        ) {
            let entries: Vec<(Prefix, Asn)> = prefixes.into_iter().collect();
            let rib = RoutingInformationBase::from_entries(entries.iter().cloned());
            for octets in probes {
                let ip = IpAddr::from(octets);
                prop_assert_eq!(rib.lookup(ip), oracle(&entries, ip));
            }
        }

        // Adding a more-specific prefix leaves addresses outside it untouched.
        #[test]
        fn more_specific_insert_is_local(
            prefixes in proptest::collection::btree_map(arb_prefix_v4(), 1u32..100000, 1..32),
            extra in arb_prefix_v4(),
            probes in proptest::collection::vec(any::<[u8; 4]>(), 1..64),
        ) {
            let base: Vec<(Prefix, Asn)> = prefixes.into_iter().collect();
            let before = RoutingInformationBase::from_entries(base.iter().cloned());
            let mut extended = base.clone();
            extended.push((extra, 99_999));
            let after = RoutingInformationBase::from_entries(extended);
            for octets in probes {
                let ip = IpAddr::from(octets);
                if !extra.contains(ip) {
                    prop_assert_eq!(before.lookup(ip), after.lookup(ip));
                }
            }
        }
    }
}
