"""Back-of-the-envelope sizing for a certificate-transparency log.

Upload and testing demand for a large log, and the TEE history length
needed when the monitor pulls less often than the TEE emits batches.

    python demos/05_sizing.py
"""

from gyokuro.bench import ct_submission_rate, ct_testing_demand
from gyokuro.tee import compute_history_capacity


def main() -> None:
    print(f"460,000 certificates/hour -> {ct_submission_rate(460_000):.1f} submissions/s")
    exact = ct_testing_demand(2048, 163)
    rounded = ct_testing_demand(2048, 163, rate_decimals=3)
    print(f"2048 users x 163 pages/day -> {exact:.2f} tests/s ({rounded:.1f} with the per-user rate rounded to 0.002/s)")
    print()
    print("batches/s  monitor pulls/s  history entries")
    for ft, fm in ((1, 1), (10, 3), (4, 0.5), (1.1, 0.1), (128 / 32, 1 / 60)):
        print(f"{ft:9.3f}  {fm:15.4f}  {compute_history_capacity(ft, fm):15d}")


if __name__ == "__main__":
    main()
