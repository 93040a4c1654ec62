import pytest
from fastapi.testclient import TestClient

from com.mhire.app.main import app

client = TestClient(app)


def test_health_check():
    response = client.get("/")
    assert response.status_code == 200
    assert "running and healthy" in response.text


def test_laplace_endpoint_matches_the_gamma_law():
    response = client.post("/api/v1/mechanism/laplace", json={
        "b": 1.0, "c": 1.0, "beta": 1.0, "lambdas": [0.5, 1.0, 2.0],
    })
    assert response.status_code == 200
    body = response.json()
    assert body["stationary_mean"] == pytest.approx(1.0)
    for point in body["points"]:
        assert point["stationary_laplace"] == pytest.approx(1.0 / (1.0 + point["lam"]), abs=1e-10)
        assert point["phi"] == pytest.approx(point["lam"] + point["lam"] ** 2)


def test_laplace_endpoint_reports_the_variance_domain():
    response = client.post("/api/v1/mechanism/laplace", json={
        "b": 1.0, "c": 1.0, "beta": 1.0, "lambdas": [1.0, 4.0], "include_variance": True,
        "density": {"family": "exponential", "rate": 0.3, "scale": 1.0},
    })
    assert response.status_code == 200
    body = response.json()
    assert 2.9 < body["admissible_lambda_max"] < 3.0
    finite, outside = body["points"]
    assert finite["asymptotic_variance"] > 0
    assert outside["asymptotic_variance"] is None


def test_laplace_endpoint_rejects_points_outside_the_flow_domain():
    response = client.post("/api/v1/mechanism/laplace", json={
        "b": 1.0, "c": 1.0, "beta": 1.0, "lambdas": [-2.0], "t": 1.0,
    })
    assert response.status_code == 422
    assert response.json()["detail"]["error_type"] == "FlowDomainError"


def test_simulator_endpoint():
    payload = {"b": 1.0, "c": 1.0, "beta": 1.0, "n": 5, "seed": 4,
               "density": {"family": "exponential", "rate": 1.0, "scale": 1.0}}
    first = client.post("/api/v1/simulator/path", json=payload)
    assert first.status_code == 200
    body = first.json()
    assert len(body["values"]) == 6
    assert body["scheme_used"] == "exact-cir-jumps"
    assert client.post("/api/v1/simulator/path", json=payload).json()["values"] == body["values"]


def test_simulator_endpoint_errors():
    assert client.post("/api/v1/simulator/path", json={"b": 0.0, "c": 1.0, "beta": 1.0, "n": 5}).status_code == 422
    response = client.post("/api/v1/simulator/path", json={
        "b": 1.0, "c": 1.0, "beta": 1.0, "n": 5, "small_jump_cutoff": 0.0,
        "density": {"family": "gamma", "shape": 0.0, "rate": 1.0, "scale": 1.0},
    })
    assert response.status_code == 400
    assert response.json()["detail"]["error_type"] == "SimulationConfigError"


def test_estimator_endpoint():
    values = client.post("/api/v1/simulator/path", json={
        "b": 1.0, "c": 1.0, "beta": 1.0, "n": 100, "seed": 2,
    }).json()["values"]
    response = client.post("/api/v1/estimator/fit", json={
        "values": values, "b": 1.0, "c": 1.0, "beta": 1.0,
        "n_lambda": 12, "z_min_exp": -2, "z_max_exp": 2, "cells_per_block": 1, "R": 8.0,
    })
    assert response.status_code == 200
    reports = response.json()["reports"]
    assert set(reports) == {"g1", "g2"}
    assert all(len(report["density_values"]) == 4 for report in reports.values())


def test_estimator_endpoint_rejects_negative_observations():
    response = client.post("/api/v1/estimator/fit", json={
        "values": [1.0, -1.0], "b": 1.0, "c": 1.0, "beta": 1.0,
    })
    assert response.status_code == 400


@pytest.mark.slow
def test_validate_endpoint():
    response = client.post("/api/v1/harness/validate", json={"quick": True})
    assert response.status_code == 200
    body = response.json()
    assert body["passed"]
    assert body["summary"]["fail"] == 0
