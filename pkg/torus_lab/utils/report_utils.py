"""
Report envelopes shared by every suite.

Each suite ends in one envelope: "00" for success, or the code carried by the
failure that stopped it.
"""
SUCCESS_CODE = "00"
INVARIANT_FAILURE_CODE = "01"
CONFIG_ERROR_CODE = "02"
NUMERICAL_FAILURE_CODE = "03"

EXIT_CODES = {
    SUCCESS_CODE: 0,
    INVARIANT_FAILURE_CODE: 1,
    NUMERICAL_FAILURE_CODE: 1,
    CONFIG_ERROR_CODE: 2,
}


def success_report(data, description="Success"):
    return {
        "responseCode": SUCCESS_CODE,
        "responseDescription": description,
        "data": data
    }


def error_report(code, description, data=None):
    return {
        "responseCode": code,
        "responseDescription": description,
        "data": data
    }


def exit_code_for(report):
    return EXIT_CODES.get(report["responseCode"], 1)
