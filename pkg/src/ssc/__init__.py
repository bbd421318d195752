"""Shared services cooperation gateway for multi-administration e-government.

A middleware stack sitting between front-office portals and back-office
systems: signed envelopes, synchronous request mediation, publish/subscribe
events, process orchestration with human tasks, a life-event service
catalog, single sign-on, and full audit traceability — plus a simulated
multi-administration harness for end-to-end one-stop scenarios.
"""

__version__ = "0.1.0"
