package fixture.three;

class Helper {
    static String key() {
        return String.valueOf(7 * 6) + "-" + String.valueOf('x');
    }
}
