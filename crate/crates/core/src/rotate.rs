//! Rotate-and-add building blocks shared by the forward and backward passes.

use crate::error::{Error, Result};
use crate::he_sim::HeBackend;
use crate::ledger::OpLedger;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `out[s] = Σ_k x[s + k·stride]`: gathers a window onto its first slot.
    Gather,
    /// `out[s] = Σ_k x[s − k·stride]`: spreads each slot over the window.
    Spread,
}

/// Sums `count` shifted copies of `ct` spaced `stride` slots apart.
///
/// Walks the binary expansion of `count` from the top bit: a zero bit doubles
/// the window (one Rot of the accumulator), a one bit doubles and then
/// extends by a single copy of `ct`. For a power of two this is the plain
/// doubling ladder with offsets `stride·2^(j−1)`, i.e. `log2(count)` Rot and
/// ⊕; otherwise extra steps cover exactly `count` copies.
pub fn fold_window<B: HeBackend>(
    be: &B,
    ct: &B::Ciphertext,
    count: usize,
    stride: usize,
    dir: Direction,
    ledger: &mut OpLedger,
) -> Result<B::Ciphertext> {
    if count == 0 {
        return Err(Error::InvalidParameter("empty rotate-and-add window".into()));
    }
    let s = be.slot_count();
    if count.saturating_mul(stride) > s {
        return Err(Error::InvalidParameter(format!(
            "window of {count} copies at stride {stride} exceeds {s} slots"
        )));
    }
    let rot = |c: &B::Ciphertext, by: usize, l: &mut OpLedger| match dir {
        Direction::Gather => be.rotate(c, by % s, l),
        Direction::Spread => be.rotate_right(c, by % s, l),
    };
    let top = usize::BITS - 1 - count.leading_zeros();
    let mut acc = ct.clone();
    let mut len = 1usize;
    for bit in (0..top).rev() {
        let shifted = rot(&acc, len * stride, ledger)?;
        acc = be.add(&acc, &shifted, ledger)?;
        len *= 2;
        if count >> bit & 1 == 1 {
            // Gather: acc + x shifted by len; Spread: x + acc shifted by one.
            let next = match dir {
                Direction::Gather => {
                    let tail = rot(ct, len * stride, ledger)?;
                    be.add(&acc, &tail, ledger)?
                }
                Direction::Spread => {
                    let moved = rot(&acc, stride, ledger)?;
                    be.add(ct, &moved, ledger)?
                }
            };
            acc = next;
            len += 1;
        }
    }
    debug_assert_eq!(len, count);
    Ok(acc)
}

/// Number of rotations (equal to the number of ⊕) `fold_window` spends.
pub fn fold_cost(count: usize) -> usize {
    if count <= 1 {
        return 0;
    }
    let top = (usize::BITS - 1 - count.leading_zeros()) as usize;
    top + count.count_ones() as usize - 1
}

/// Σ a_k ⊗ b_k, seeding the accumulator with the first product so that k
/// products cost k − 1 ⊕.
pub fn dot<'a, B, I>(be: &B, pairs: I, ledger: &mut OpLedger) -> Result<B::Ciphertext>
where
    B: HeBackend,
    B::Ciphertext: 'a,
    I: IntoIterator<Item = (&'a B::Ciphertext, &'a B::Ciphertext)>,
{
    let mut acc: Option<B::Ciphertext> = None;
    for (a, b) in pairs {
        let p = be.multiply(a, b, ledger)?;
        acc = Some(match acc {
            None => p,
            Some(s) => be.add(&s, &p, ledger)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidParameter("empty product sum".into()))
}

/// Σ of already computed ciphertexts, k terms costing k − 1 ⊕.
pub fn sum<'a, B, I>(be: &B, terms: I, ledger: &mut OpLedger) -> Result<B::Ciphertext>
where
    B: HeBackend,
    B::Ciphertext: 'a,
    I: IntoIterator<Item = &'a B::Ciphertext>,
{
    let mut acc: Option<B::Ciphertext> = None;
    for t in terms {
        acc = Some(match acc {
            None => t.clone(),
            Some(s) => be.add(&s, t, ledger)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidParameter("empty sum".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he_sim::{keygen, HeDecrypt, SimBackend, SlotVector};
    use crate::ledger::OpKind;
    use proptest::prelude::*;

    fn sim(slots: usize) -> SimBackend {
        SimBackend::new(keygen(128, 3, slots).unwrap())
    }

    fn window_ref(x: &[f64], count: usize, stride: usize, dir: Direction) -> Vec<f64> {
        let s = x.len();
        (0..s)
            .map(|i| {
                (0..count)
                    .map(|k| match dir {
                        Direction::Gather => x[(i + k * stride) % s],
                        Direction::Spread => x[(i + s * count - k * stride) % s],
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn doubling_ladder_replicates() {
        let be = sim(8);
        let mut l = OpLedger::new();
        let x = be
            .encrypt(&SlotVector::from_vec(vec![20., 40., 0., 0., 0., 0., 92., 184.]), &mut l)
            .unwrap();
        let y = fold_window(&be, &x, 4, 2, Direction::Gather, &mut l).unwrap();
        assert_eq!(
            be.decrypt(&y, &mut l).unwrap().into_vec(),
            vec![112., 224., 112., 224., 112., 224., 112., 224.]
        );
        assert_eq!((l.count(OpKind::Rot), l.count(OpKind::Add)), (2, 2));
    }

    #[test]
    fn costs() {
        assert_eq!(fold_cost(1), 0);
        assert_eq!(fold_cost(2), 1);
        assert_eq!(fold_cost(64), 6);
        assert_eq!(fold_cost(3), 2);
        assert_eq!(fold_cost(5), 3);
        assert_eq!(fold_cost(7), 4);
    }

    proptest! {
        #[test]
        fn matches_reference(
            values in prop::collection::vec(-50i32..50, 32),
            count in 1usize..=16,
            stride in 1usize..=2,
            spread in any::<bool>(),
        ) {
            let dir = if spread { Direction::Spread } else { Direction::Gather };
            let be = sim(32);
            let mut l = OpLedger::new();
            let x: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let ct = be.encrypt(&SlotVector::from_vec(x.clone()), &mut l).unwrap();
            let mut fl = OpLedger::new();
            let y = fold_window(&be, &ct, count, stride, dir, &mut fl).unwrap();
            prop_assert_eq!(be.decrypt(&y, &mut l).unwrap().into_vec(), window_ref(&x, count, stride, dir));
            prop_assert_eq!(fl.count(OpKind::Rot) as usize, fold_cost(count));
            prop_assert_eq!(fl.count(OpKind::Add) as usize, fold_cost(count));
        }
    }
}
