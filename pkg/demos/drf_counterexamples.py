"""DRF against the offline min-max-rho allocation on two small clusters.

Run: python demos/drf_counterexamples.py
"""

from __future__ import annotations

from ftfair.auction import offline_minmax_rho
from ftfair.cluster import span_level
from ftfair.instances import drf_allocation, drf_instance_1, drf_instance_2
from ftfair.schedulers import check_properties


def show(title, apps, alloc, cluster) -> None:
    report = check_properties(apps, alloc, cluster)
    print(title)
    for app in apps:
        gpus = alloc.get(app.app_id, frozenset())
        print(f"  {app.app_id} ({app.app_class}): {len(gpus)} GPUs, span {span_level(gpus).name.lower()}")
    print(f"  SI violations {report.si_violations}, envy {report.envy}, Pareto efficient {report.pe_ok}")


def main() -> None:
    cluster, apps = drf_instance_1()
    show("instance 1, DRF", apps, drf_allocation(cluster, apps), cluster)
    show("instance 1, min-max rho", apps, offline_minmax_rho(apps, cluster), cluster)
    cluster, apps = drf_instance_2()
    show("instance 2, DRF (A1 arrives first)", apps, drf_allocation(cluster, apps, sequential=True), cluster)
    show("instance 2, min-max rho", apps, offline_minmax_rho(apps, cluster), cluster)


if __name__ == "__main__":
    main()
