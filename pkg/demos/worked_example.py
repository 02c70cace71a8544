"""Bid table of the 16-GPU hyper-parameter search app, then one auction round.

Run: python demos/worked_example.py
"""

from __future__ import annotations

from dataclasses import replace

from ftfair.apps import AppRuntime, ideal_time
from ftfair.auction import AuctionInput, auction
from ftfair.bidding import Offer, prepare_bid
from ftfair.instances import worked_bid_table, worked_example


def main() -> None:
    ex = worked_example()
    print(f"T_id = {ideal_time(ex.app, ex.runtime, ex.cluster):g} s")
    print("GPUs   rho")
    for row in sorted(worked_bid_table(ex).rows, key=lambda r: r.count):
        print(f"{row.count:>4}  {row.rho:.4f}")

    # two copies of the same app bid for the whole machine
    offer = Offer(0, frozenset(ex.cluster.all_gpus()))
    bids = []
    for name in ("hp-a", "hp-b"):
        app = replace(ex.app, app_id=name)
        rt = AppRuntime.start(app, now=0.0, n_avg=4)
        bids.append((name, prepare_bid(app, rt, offer, 0.0, ex.cluster)))
    profiles = {name: ex.app.profile for name, _ in bids}
    result = auction(AuctionInput(0, offer.gpus, tuple(bids), ("hp-a", "hp-b")), profiles)
    print("\nauction over 16 GPUs")
    for app_id, row in result.chosen.items():
        print(f"  {app_id}: proportional-fair share {len(row)} GPUs, c = {result.c[app_id]:.3f}, "
              f"granted {len(result.grants[app_id])}")
    print(f"  leftover {len(result.leftover)} GPUs (fractional {result.fractional_leftover:.2f})")


if __name__ == "__main__":
    main()
